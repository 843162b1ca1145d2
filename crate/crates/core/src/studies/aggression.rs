//! Aggression-mitigation case study: a robot between a background car and an
//! aggressive human either shapes the human's following through barriers
//! (treatment) or simply drives IDM with normal parameters (control).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::behavior::{IdmParams, LaneChangeParams};
use crate::cbf::{BarrierForm, BarrierSpec};
use crate::error::{Error, Result};
use crate::sim::{run, NoiseConfig, SimConfig, TrajectoryLog};
use crate::studies::stats::mean_abs_jerk;
use crate::world::{CarId, CarKind, ControlLimits, HumanDriver, RobotDriver, VehicleState, WorldState};

pub const BACKGROUND: CarId = CarId(1);
pub const ROBOT: CarId = CarId(2);
pub const HUMAN: CarId = CarId(3);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggressionConfig {
    pub duration: f64,
    pub dt: f64,
    pub aggressive: IdmParams,
    pub normal: IdmParams,
    /// Bumper gap the human should keep behind the robot, m.
    pub gap_min: f64,
    pub v_max: f64,
    pub a_min: f64,
    pub a_max: f64,
    /// Bumper gap the robot keeps to the background car, m.
    pub robot_headway: f64,
    pub headway_weight: f64,
    pub v_initial: (f64, f64),
    pub noise: NoiseConfig,
    /// With influence off the treatment arm drives like the control arm.
    pub influence: bool,
}

impl Default for AggressionConfig {
    fn default() -> Self {
        Self {
            duration: 60.0,
            dt: 0.01,
            aggressive: IdmParams::AGGRESSIVE,
            normal: IdmParams::NORMAL,
            gap_min: IdmParams::NORMAL.s0,
            v_max: IdmParams::NORMAL.v0,
            a_min: -IdmParams::NORMAL.b_max,
            a_max: IdmParams::NORMAL.a_max,
            robot_headway: IdmParams::NORMAL.s0,
            headway_weight: 1e4,
            v_initial: (25.0, 35.0),
            noise: NoiseConfig {
                sd_s0: 0.2,
                sd_v0: 2.0,
                sd_abt: 0.1,
                sd_control: 0.2,
                background_control: true,
            },
            influence: true,
        }
    }
}

/// Samples the shared initial world of one trial; the robot starts under influence control.
pub fn aggression_world(seed: u64, cfg: &AggressionConfig) -> WorldState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = crate::world::DEFAULT_CAR_LENGTH;
    // sampled offsets are read as bumper gaps so the cars never start overlapping
    let p_human = -l + rng.random_range(-3.0 * l..-l);
    let p_background = l + rng.random_range(l..3.0 * l);
    let mut v = || rng.random_range(cfg.v_initial.0..cfg.v_initial.1);
    let (v_h, v_r, v_b) = (v(), v(), v());
    WorldState::new(
        1,
        vec![
            VehicleState::new(BACKGROUND.0, CarKind::Background, 1, p_background, v_b),
            VehicleState::new(ROBOT.0, CarKind::robot(ControlLimits::default()), 1, 0.0, v_r),
            VehicleState::new(
                HUMAN.0,
                CarKind::Human(HumanDriver {
                    idm: cfg.aggressive,
                    lane_change: LaneChangeParams::default(),
                }),
                1,
                p_human,
                v_h,
            ),
        ],
    )
}

pub fn treatment_specs(cfg: &AggressionConfig, car_length: f64) -> Vec<BarrierSpec> {
    vec![
        BarrierSpec::new(
            "gap_min",
            BarrierForm::GapLower {
                front: ROBOT,
                back: HUMAN,
                margin: cfg.gap_min + car_length,
            },
        ),
        BarrierSpec::new("v_max", BarrierForm::VelocityUpper { car: HUMAN, v_max: cfg.v_max }),
        BarrierSpec::new("a_min", BarrierForm::AccelLower { car: HUMAN, a_min: cfg.a_min }),
        BarrierSpec::new("a_max", BarrierForm::AccelUpper { car: HUMAN, a_max: cfg.a_max }),
        BarrierSpec::new(
            "robot_headway",
            BarrierForm::GapLower {
                front: BACKGROUND,
                back: ROBOT,
                margin: cfg.robot_headway + car_length,
            },
        )
        .with_slack_weight(cfg.headway_weight),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggressionArm {
    /// Mean |jerk| of the human's commanded acceleration, m/s³.
    pub jerk: f64,
    pub log: TrajectoryLog,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggressionTrial {
    pub treatment: AggressionArm,
    pub control: AggressionArm,
}

fn sim_config(seed: u64, cfg: &AggressionConfig) -> SimConfig {
    SimConfig {
        dt: cfg.dt,
        duration: cfg.duration,
        seed,
        noise: cfg.noise,
        incentive_enabled: true,
        brake_floor: crate::cbf::DEFAULT_BRAKE_FLOOR,
    }
}

pub fn human_jerk(log: &TrajectoryLog) -> Result<f64> {
    let accel: Vec<f64> = log
        .steps
        .iter()
        .filter_map(|s| s.car(HUMAN).map(|c| c.a_cmd))
        .collect();
    mean_abs_jerk(&accel, log.dt)
}

/// One arm of a trial; both arms share the seed and so every random draw.
pub fn aggression_arm(seed: u64, treatment: bool, cfg: &AggressionConfig) -> Result<AggressionArm> {
    let mut world = aggression_world(seed, cfg);
    let specs = if treatment && cfg.influence {
        treatment_specs(cfg, world.car_length)
    } else {
        if let CarKind::Robot { driver, .. } = &mut world.car_mut(ROBOT)?.kind {
            *driver = RobotDriver::Idm(cfg.normal);
        }
        Vec::new()
    };
    let log = run(world, &specs, sim_config(seed, cfg)).map_err(|f| Error::Fault(f.to_string()))?;
    Ok(AggressionArm {
        jerk: human_jerk(&log)?,
        log,
    })
}

pub fn aggression_trial(seed: u64, cfg: &AggressionConfig) -> Result<AggressionTrial> {
    Ok(AggressionTrial {
        treatment: aggression_arm(seed, true, cfg)?,
        control: aggression_arm(seed, false, cfg)?,
    })
}
