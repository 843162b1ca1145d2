//! Human driver models: IDM car following, its analytic partial
//! derivatives, and the gap/speed lane-change rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{CarId, VehicleState, WorldState};

/// Intelligent driver model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdmParams {
    /// Maximum acceleration, m/s².
    pub a_max: f64,
    /// Comfortable deceleration magnitude, m/s².
    pub b_max: f64,
    /// Desired velocity, m/s.
    pub v0: f64,
    /// Jam distance, m.
    pub s0: f64,
    /// Time headway, s.
    pub headway: f64,
}

impl IdmParams {
    /// Substitute "normal driving" set.
    pub const NORMAL: IdmParams = IdmParams {
        a_max: 1.4,
        b_max: 2.0,
        v0: 35.0,
        s0: 2.0,
        headway: 1.5,
    };

    /// Substitute "aggressive driving" set.
    pub const AGGRESSIVE: IdmParams = IdmParams {
        a_max: 2.5,
        b_max: 3.5,
        v0: 40.0,
        s0: 1.0,
        headway: 0.8,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = [self.a_max, self.b_max, self.v0, self.s0, self.headway]
            .iter()
            .all(|x| x.is_finite() && *x > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("IDM parameters must be positive: {self:?}")))
        }
    }

    fn sqrt_ab(&self) -> f64 {
        (self.a_max * self.b_max).sqrt()
    }

    /// Desired dynamic gap s*(v, Δv) with Δv = v - v_leader.
    pub fn desired_gap(&self, v: f64, dv: f64) -> f64 {
        self.s0 + v * self.headway + v * dv / (2.0 * self.sqrt_ab())
    }
}

impl Default for IdmParams {
    fn default() -> Self {
        Self::NORMAL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaneChangeParams {
    /// Minimum position difference to the neighbours in the target lane, m.
    pub s_min: f64,
    /// Speed advantage the front car in the target lane must offer, m/s.
    pub dv_th: f64,
    /// Minimum time between two lane changes, s.
    #[serde(default = "default_cooldown")]
    pub cooldown: f64,
    /// Restrict changes to moves toward this lane; `None` means either side.
    #[serde(default)]
    pub target_lane: Option<u32>,
}

fn default_cooldown() -> f64 {
    5.0
}

impl Default for LaneChangeParams {
    fn default() -> Self {
        Self {
            s_min: 10.0,
            dv_th: 3.0,
            cooldown: default_cooldown(),
            target_lane: None,
        }
    }
}

impl LaneChangeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.s_min > 0.0 && self.cooldown >= 0.0 && self.dv_th.is_finite()) {
            return Err(Error::invalid(format!("bad lane-change parameters: {self:?}")));
        }
        Ok(())
    }
}

/// Position and velocity of the car being followed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Leader {
    pub p: f64,
    pub v: f64,
}

impl Leader {
    pub fn of(car: &VehicleState) -> Self {
        Self { p: car.p, v: car.v }
    }
}

fn bumper_gap(follower: &VehicleState, leader: &Leader, car_length: f64) -> Result<f64> {
    let s = leader.p - follower.p - car_length;
    if s > 0.0 {
        Ok(s)
    } else {
        Err(Error::Collision {
            follower: follower.id,
            gap: s,
        })
    }
}

/// IDM acceleration. A missing leader means free road.
pub fn idm_accel(
    follower: &VehicleState,
    leader: Option<Leader>,
    params: &IdmParams,
    car_length: f64,
) -> Result<f64> {
    let v = follower.v;
    let free = 1.0 - (v / params.v0).powi(4);
    let interaction = match leader {
        None => 0.0,
        Some(l) => {
            let s = bumper_gap(follower, &l, car_length)?;
            (params.desired_gap(v, v - l.v) / s).powi(2)
        }
    };
    Ok(params.a_max * (free - interaction))
}

/// Partial derivatives of the IDM acceleration with respect to follower
/// and leader position and velocity.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IdmPartials {
    pub df_dp_follower: f64,
    pub df_dv_follower: f64,
    pub df_dp_leader: f64,
    pub df_dv_leader: f64,
}

pub fn idm_partials(
    follower: &VehicleState,
    leader: Leader,
    params: &IdmParams,
    car_length: f64,
) -> Result<IdmPartials> {
    let v = follower.v;
    let s = bumper_gap(follower, &leader, car_length)?;
    let star = params.desired_gap(v, v - leader.v);
    let two_sqrt_ab = 2.0 * params.sqrt_ab();

    // f = a (1 - (v/v0)^4 - (s*/s)^2), s = p_L - p_F - l
    let df_ds = 2.0 * params.a_max * star * star / (s * s * s);
    let df_dstar = -2.0 * params.a_max * star / (s * s);
    let dstar_dv = params.headway + (2.0 * v - leader.v) / two_sqrt_ab;
    let dstar_dvl = -v / two_sqrt_ab;

    Ok(IdmPartials {
        df_dp_follower: -df_ds,
        df_dv_follower: -4.0 * params.a_max * v.powi(3) / params.v0.powi(4)
            + df_dstar * dstar_dv,
        df_dp_leader: df_ds,
        df_dv_leader: df_dstar * dstar_dvl,
    })
}

/// Control-independent part of the follower's jerk:
/// `∂f/∂p_F v_F + ∂f/∂v_F a_F + ∂f/∂p_L v_L`.
///
/// When the leader is a robot with control `u`, `ḟ = λ + ∂f/∂v_L u`.
pub fn lambda_term(partials: &IdmPartials, v_follower: f64, a_follower: f64, v_leader: f64) -> f64 {
    partials.df_dp_follower * v_follower
        + partials.df_dv_follower * a_follower
        + partials.df_dp_leader * v_leader
}

fn human_params<'a>(world: &'a WorldState, car: CarId) -> Result<(&'a VehicleState, &'a LaneChangeParams)> {
    let me = world.car(car)?;
    let h = me
        .human()
        .ok_or_else(|| Error::invalid(format!("car {car} is not human-driven")))?;
    Ok((me, &h.lane_change))
}

fn check_adjacent(world: &WorldState, me: &VehicleState, target_lane: u32) -> Result<()> {
    world.check_lane(target_lane)?;
    if me.lane.abs_diff(target_lane) != 1 {
        return Err(Error::invalid(format!(
            "lane {target_lane} is not adjacent to lane {} of car {}",
            me.lane, me.id
        )));
    }
    Ok(())
}

/// Gap criterion: both neighbours in `target_lane` at least `s_min` away.
pub fn lane_safety(world: &WorldState, car: CarId, target_lane: u32) -> Result<bool> {
    let (me, lc) = human_params(world, car)?;
    check_adjacent(world, me, target_lane)?;
    let front_ok = match world.leader_of(car, target_lane)? {
        Some(f) => world.car(f)?.p - me.p - lc.s_min >= 0.0,
        None => true,
    };
    let back_ok = match world.follower_of(car, target_lane)? {
        Some(b) => me.p - world.car(b)?.p - lc.s_min >= 0.0,
        None => true,
    };
    Ok(front_ok && back_ok)
}

/// Speed criterion: the front car in `target_lane` is at least `dv_th` faster.
pub fn lane_incentive(world: &WorldState, car: CarId, target_lane: u32) -> Result<bool> {
    let (me, lc) = human_params(world, car)?;
    check_adjacent(world, me, target_lane)?;
    Ok(match world.leader_of(car, target_lane)? {
        Some(f) => world.car(f)?.v - me.v - lc.dv_th >= 0.0,
        None => true,
    })
}

/// Lane-change decision in {-1, 0, +1}; -1 is toward lane 1 (left) and wins ties.
pub fn lane_decision(world: &WorldState, car: CarId, incentive_enabled: bool) -> Result<i8> {
    let (me, lc) = human_params(world, car)?;
    if me.lc_cooldown > 0.0 {
        return Ok(0);
    }
    for dir in [-1i8, 1] {
        let target = me.lane as i64 + dir as i64;
        if target < 1 || target > world.lanes as i64 {
            continue;
        }
        let target = target as u32;
        if let Some(goal) = lc.target_lane {
            if goal.abs_diff(target) >= goal.abs_diff(me.lane) {
                continue;
            }
        }
        if lane_safety(world, car, target)?
            && (!incentive_enabled || lane_incentive(world, car, target)?)
        {
            return Ok(dir);
        }
    }
    Ok(0)
}
