//! World state: cars, lanes, leader lookup and gap geometry.
//!
//! Positions are longitudinal coordinates on an axis shared by every lane.
//! A car occupies `[p - car_length, p]`, so `p` is its front bumper.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::behavior::{IdmParams, LaneChangeParams};
use crate::error::{Error, Result};

/// Default car length in meters.
pub const DEFAULT_CAR_LENGTH: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CarId(pub u32);

impl fmt::Display for CarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Robot velocity and acceleration bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlLimits {
    pub v_lo: f64,
    pub v_hi: f64,
    pub a_lo: f64,
    pub a_hi: f64,
}

impl Default for ControlLimits {
    fn default() -> Self {
        Self {
            v_lo: 0.0,
            v_hi: 35.0,
            a_lo: -4.0,
            a_hi: 2.0,
        }
    }
}

impl ControlLimits {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_lo < self.v_hi) {
            return Err(Error::invalid(format!(
                "control limits need v_lo < v_hi, got [{}, {}]",
                self.v_lo, self.v_hi
            )));
        }
        if !(self.a_lo < 0.0 && 0.0 < self.a_hi) {
            return Err(Error::invalid(format!(
                "control limits need a_lo < 0 < a_hi, got [{}, {}]",
                self.a_lo, self.a_hi
            )));
        }
        Ok(())
    }
}

/// Parameters of a human driver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HumanDriver {
    pub idm: IdmParams,
    pub lane_change: LaneChangeParams,
}

/// How a robot chooses its acceleration.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum RobotDriver {
    /// Control comes from the influence QP.
    #[default]
    Influence,
    /// Robot follows the IDM like an ordinary car; its QP column is pinned.
    Idm(IdmParams),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CarKind {
    Human(HumanDriver),
    Robot {
        limits: ControlLimits,
        driver: RobotDriver,
    },
    Background,
}

impl CarKind {
    pub fn robot(limits: ControlLimits) -> Self {
        CarKind::Robot {
            limits,
            driver: RobotDriver::Influence,
        }
    }

    pub fn is_human(&self) -> bool {
        matches!(self, CarKind::Human(_))
    }

    pub fn is_robot(&self) -> bool {
        matches!(self, CarKind::Robot { .. })
    }

    pub fn label(&self) -> &'static str {
        match self {
            CarKind::Human(_) => "human",
            CarKind::Robot { .. } => "robot",
            CarKind::Background => "background",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleState {
    pub id: CarId,
    pub kind: CarKind,
    /// Lane index in `1..=lanes`, lane 1 is leftmost.
    pub lane: u32,
    pub p: f64,
    pub v: f64,
    /// Last applied acceleration.
    pub a: f64,
    /// Seconds until another lane change is allowed.
    pub lc_cooldown: f64,
}

impl VehicleState {
    pub fn new(id: u32, kind: CarKind, lane: u32, p: f64, v: f64) -> Self {
        Self {
            id: CarId(id),
            kind,
            lane,
            p,
            v,
            a: 0.0,
            lc_cooldown: 0.0,
        }
    }

    pub fn human(&self) -> Option<&HumanDriver> {
        match &self.kind {
            CarKind::Human(h) => Some(h),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub cars: Vec<VehicleState>,
    pub lanes: u32,
    pub t: f64,
    pub car_length: f64,
}

impl WorldState {
    pub fn new(lanes: u32, cars: Vec<VehicleState>) -> Self {
        Self {
            cars,
            lanes,
            t: 0.0,
            car_length: DEFAULT_CAR_LENGTH,
        }
    }

    /// Checks ids, lanes, robot limits and collision-freedom.
    pub fn validate(&self) -> Result<()> {
        if self.lanes == 0 {
            return Err(Error::invalid("world needs at least one lane"));
        }
        if !(self.car_length > 0.0) {
            return Err(Error::invalid("car length must be positive"));
        }
        for (i, car) in self.cars.iter().enumerate() {
            if self.cars[..i].iter().any(|c| c.id == car.id) {
                return Err(Error::invalid(format!("duplicate car id {}", car.id)));
            }
            self.check_lane(car.lane)?;
            if !(car.p.is_finite() && car.v.is_finite()) {
                return Err(Error::invalid(format!("car {} has non-finite state", car.id)));
            }
            match &car.kind {
                CarKind::Robot { limits, .. } => {
                    limits.validate()?;
                    if car.v < limits.v_lo || car.v > limits.v_hi {
                        return Err(Error::invalid(format!(
                            "robot {} starts at v = {} outside [{}, {}]",
                            car.id, car.v, limits.v_lo, limits.v_hi
                        )));
                    }
                }
                CarKind::Human(h) => {
                    h.idm.validate()?;
                    h.lane_change.validate()?;
                }
                CarKind::Background => {}
            }
        }
        if let Some((a, b)) = self.first_collision() {
            return Err(Error::invalid(format!("cars {a} and {b} overlap")));
        }
        Ok(())
    }

    pub fn check_lane(&self, lane: u32) -> Result<()> {
        if lane == 0 || lane > self.lanes {
            return Err(Error::invalid(format!(
                "lane {lane} outside [1, {}]",
                self.lanes
            )));
        }
        Ok(())
    }

    pub fn index_of(&self, id: CarId) -> Result<usize> {
        self.cars
            .iter()
            .position(|c| c.id == id)
            .ok_or(Error::UnknownCar(id))
    }

    pub fn car(&self, id: CarId) -> Result<&VehicleState> {
        self.index_of(id).map(|i| &self.cars[i])
    }

    pub fn car_mut(&mut self, id: CarId) -> Result<&mut VehicleState> {
        let i = self.index_of(id)?;
        Ok(&mut self.cars[i])
    }

    /// Robot ids in world order; this order defines the control vector.
    pub fn robot_ids(&self) -> Vec<CarId> {
        self.cars
            .iter()
            .filter(|c| c.kind.is_robot())
            .map(|c| c.id)
            .collect()
    }

    /// Nearest car in `lane` strictly ahead of `car`.
    pub fn leader_of(&self, car: CarId, lane: u32) -> Result<Option<CarId>> {
        let me = self.car(car)?;
        self.check_lane(lane)?;
        Ok(self
            .cars
            .iter()
            .filter(|c| c.id != car && c.lane == lane && c.p > me.p)
            .min_by(|a, b| a.p.total_cmp(&b.p))
            .map(|c| c.id))
    }

    /// Nearest car in `lane` at or behind `car`'s position (ties count as behind).
    pub fn follower_of(&self, car: CarId, lane: u32) -> Result<Option<CarId>> {
        let me = self.car(car)?;
        self.check_lane(lane)?;
        Ok(self
            .cars
            .iter()
            .filter(|c| c.id != car && c.lane == lane && c.p <= me.p)
            .max_by(|a, b| a.p.total_cmp(&b.p))
            .map(|c| c.id))
    }

    /// Bumper-to-bumper distance from `follower` to `leader`.
    pub fn gap(&self, follower: CarId, leader: CarId) -> Result<f64> {
        let f = self.car(follower)?;
        let l = self.car(leader)?;
        if l.p < f.p {
            return Err(Error::Geometry(format!(
                "car {leader} at {} is behind car {follower} at {}",
                l.p, f.p
            )));
        }
        Ok(l.p - f.p - self.car_length)
    }

    /// First pair of same-lane cars whose bodies overlap, if any.
    pub fn first_collision(&self) -> Option<(CarId, CarId)> {
        let mut order: Vec<&VehicleState> = self.cars.iter().collect();
        order.sort_by(|a, b| a.lane.cmp(&b.lane).then(a.p.total_cmp(&b.p)));
        order.windows(2).find_map(|w| {
            let (back, front) = (w[0], w[1]);
            (back.lane == front.lane && front.p - back.p < self.car_length)
                .then_some((back.id, front.id))
        })
    }
}
