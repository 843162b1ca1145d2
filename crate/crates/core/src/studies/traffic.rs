//! Traffic-flow case study: cluster humans by desired speed, steer each into
//! its cluster's lane, then let robots pace each lane at its fastest human.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::behavior::{IdmParams, LaneChangeParams};
use crate::cbf::{BarrierForm, BarrierSpec};
use crate::error::{Error, Result};
use crate::sim::{perturb_parameters, run_supervised, NoiseConfig, SimConfig, Supervisor, TrajectoryLog};
use crate::studies::stats::kmeans_1d;
use crate::world::{CarId, CarKind, ControlLimits, HumanDriver, RobotDriver, VehicleState, WorldState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrafficFlowConfig {
    pub lanes: u32,
    pub duration: f64,
    pub dt: f64,
    /// Longest influence phase for one lane change, s.
    pub phase_timeout: f64,
    /// Slot gaps ask for this much more than the human's own `s_min`, m.
    pub slot_extra: f64,
    /// Speed cap sits this far below the incentive threshold, m/s.
    pub speed_slack: f64,
    /// Lowest speed cap the robots impose, m/s.
    pub min_speed_cap: f64,
    /// Bumper gap robots keep to whatever is ahead of them while influencing, m.
    pub robot_headway: f64,
    /// Slack weight of the robots' headway barriers relative to the objectives.
    pub headway_weight: f64,
    /// Spacing between consecutive cars of a lane at t = 0, m.
    pub spacing: f64,
    pub v_desired: (f64, f64),
    pub dv_th: (f64, f64),
    pub noise: NoiseConfig,
    pub influence: bool,
    /// Include the time-headway term `T * v` in the lane-change gap threshold.
    pub headway_in_threshold: bool,
}

impl Default for TrafficFlowConfig {
    fn default() -> Self {
        Self {
            lanes: 3,
            duration: 120.0,
            dt: 0.01,
            phase_timeout: 30.0,
            slot_extra: 5.0,
            speed_slack: 0.5,
            min_speed_cap: 10.0,
            robot_headway: 10.0,
            headway_weight: 1e4,
            spacing: 50.0,
            v_desired: (25.0, 40.0),
            dv_th: (2.0, 5.0),
            noise: NoiseConfig {
                sd_s0: 0.2,
                sd_v0: 2.0,
                sd_abt: 0.1,
                sd_control: 0.2,
                background_control: false,
            },
            influence: true,
            headway_in_threshold: true,
        }
    }
}

/// Initial world of one trial together with the lane each human should end in.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficSetup {
    pub world: WorldState,
    /// `(human, lane)` in ascending id order.
    pub assignment: Vec<(CarId, u32)>,
}

fn desired_speed(car: &VehicleState) -> Option<f64> {
    car.human().map(|h| h.idm.v0)
}

fn robot_idm(v0: f64) -> RobotDriver {
    RobotDriver::Idm(IdmParams { v0, ..IdmParams::NORMAL })
}

/// Lane speed used at t = 0: the slowest desired speed among the lane's humans.
fn lane_pace(world: &WorldState, lane: u32) -> Option<f64> {
    world
        .cars
        .iter()
        .filter(|c| c.lane == lane)
        .filter_map(desired_speed)
        .min_by(f64::total_cmp)
}

/// Samples a world and clusters its humans into lanes, fastest cluster leftmost.
pub fn traffic_setup(seed: u64, cfg: &TrafficFlowConfig) -> Result<TrafficSetup> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cars = Vec::new();
    let mut next_id = 1u32;
    for lane in 1..=cfg.lanes {
        let robots = rng.random_range(1..=3usize);
        let humans = rng.random_range(1..=3usize);
        let mut kinds: Vec<bool> = std::iter::repeat_n(true, humans)
            .chain(std::iter::repeat_n(false, robots))
            .collect();
        kinds.shuffle(&mut rng);
        let offset = rng.random_range(0.0..cfg.spacing / 2.0);
        // front of the lane first so ids run back to front within a lane
        for (k, is_human) in kinds.into_iter().enumerate() {
            let p = offset - k as f64 * cfg.spacing;
            let kind = if is_human {
                let v0 = rng.random_range(cfg.v_desired.0..cfg.v_desired.1);
                let dv_th = rng.random_range(cfg.dv_th.0..cfg.dv_th.1);
                CarKind::Human(HumanDriver {
                    idm: IdmParams { v0, ..IdmParams::NORMAL },
                    lane_change: LaneChangeParams {
                        dv_th,
                        ..LaneChangeParams::default()
                    },
                })
            } else {
                CarKind::Robot {
                    limits: ControlLimits::default(),
                    driver: RobotDriver::Influence,
                }
            };
            cars.push(VehicleState::new(next_id, kind, lane, p, 0.0));
            next_id += 1;
        }
    }
    let mut world = WorldState::new(cfg.lanes, cars);
    perturb_parameters(&mut world, &cfg.noise, seed);

    let car_length = world.car_length;
    for lane in 1..=cfg.lanes {
        let pace = lane_pace(&world, lane)
            .expect("every lane holds a human")
            .min(ControlLimits::default().v_hi);
        for car in world.cars.iter_mut().filter(|c| c.lane == lane) {
            car.v = pace;
            match &mut car.kind {
                // the lane-change gap threshold equals the desired following distance
                CarKind::Human(h) => {
                    let headway = if cfg.headway_in_threshold { h.idm.headway * pace } else { 0.0 };
                    h.lane_change.s_min = h.idm.s0 + headway + car_length;
                }
                CarKind::Robot { driver, .. } => *driver = robot_idm(pace),
                CarKind::Background => {}
            }
        }
    }

    let humans: Vec<(CarId, f64)> = world
        .cars
        .iter()
        .filter_map(|c| desired_speed(c).map(|v| (c.id, v)))
        .collect();
    let speeds: Vec<f64> = humans.iter().map(|h| h.1).collect();
    let k = (cfg.lanes as usize).min(speeds.len());
    let clusters = kmeans_1d(&speeds, k)?;
    let assignment = humans
        .iter()
        .zip(&clusters.assignments)
        // cluster 0 is the slowest and goes to the rightmost lane
        .map(|(&(id, _), &c)| (id, cfg.lanes - c as u32))
        .collect();
    Ok(TrafficSetup { world, assignment })
}

#[derive(Debug, Clone, PartialEq)]
struct Phase {
    human: CarId,
    from: u32,
    /// Recruited robots with the drivers they had before the phase.
    robots: Vec<(CarId, RobotDriver)>,
    specs: Vec<BarrierSpec>,
    start: f64,
}

/// Runs the per-human influence phases, then hands robots back to IDM.
#[derive(Debug, Clone)]
pub struct TrafficSupervisor {
    cfg: TrafficFlowConfig,
    queue: std::collections::VecDeque<(CarId, u32)>,
    phase: Option<Phase>,
    finished: bool,
    pub phases_started: usize,
    pub phases_timed_out: usize,
}

impl TrafficSupervisor {
    pub fn new(assignment: &[(CarId, u32)], cfg: TrafficFlowConfig) -> Self {
        let queue = if cfg.influence {
            assignment.iter().copied().collect()
        } else {
            Default::default()
        };
        Self {
            cfg,
            queue,
            phase: None,
            finished: false,
            phases_started: 0,
            phases_timed_out: 0,
        }
    }

    pub fn finished(&self) -> bool {
        self.finished
    }

    fn end_phase(&mut self, world: &mut WorldState) {
        if let Some(phase) = self.phase.take() {
            for (r, previous) in phase.robots {
                if let Ok(car) = world.car_mut(r) {
                    if let CarKind::Robot { driver, .. } = &mut car.kind {
                        *driver = previous;
                    }
                }
            }
        }
    }

    fn start_phase(&mut self, world: &mut WorldState, human: CarId, goal: u32) -> Result<()> {
        let me = world.car(human)?.clone();
        let lc = me.human().expect("queued cars are human").lane_change;
        let target = if goal < me.lane { me.lane - 1 } else { me.lane + 1 };
        // only the immediate neighbours decide whether the slot is safe
        let robot = |id: Option<CarId>| -> Result<Option<CarId>> {
            Ok(match id {
                Some(c) if world.car(c)?.kind.is_robot() => Some(c),
                _ => None,
            })
        };
        let front = robot(world.leader_of(human, target)?)?;
        let back = robot(world.follower_of(human, target)?)?;
        let leader = robot(world.leader_of(human, me.lane)?)?;

        let margin = lc.s_min + self.cfg.slot_extra;
        let mut specs = Vec::new();
        if let Some(f) = front {
            specs.push(BarrierSpec::new(
                format!("slot_front_{human}"),
                BarrierForm::GapLower { front: f, back: human, margin },
            ));
        }
        if let Some(b) = back {
            specs.push(BarrierSpec::new(
                format!("slot_back_{human}"),
                BarrierForm::GapLower { front: human, back: b, margin },
            ));
        }
        // incentive: the human must be dv_th slower than the car it will follow
        if let Some(f) = world.leader_of(human, target)? {
            let v_front = world.car(f)?.v;
            let cap = (v_front - lc.dv_th - self.cfg.speed_slack).max(self.cfg.min_speed_cap);
            specs.push(BarrierSpec::new(
                format!("incentive_{human}"),
                BarrierForm::VelocityUpper { car: human, v_max: cap },
            ));
        }

        let mut recruited: Vec<CarId> = [front, back, leader].into_iter().flatten().collect();
        recruited.dedup();
        let mut robots = Vec::with_capacity(recruited.len());
        for r in recruited {
            if let CarKind::Robot { driver, .. } = &mut world.car_mut(r)?.kind {
                robots.push((r, *driver));
                *driver = RobotDriver::Influence;
            }
        }
        self.phases_started += 1;
        self.phase = Some(Phase {
            human,
            from: me.lane,
            robots,
            specs,
            start: world.t,
        });
        Ok(())
    }

    fn finish(&mut self, world: &mut WorldState) {
        // each robot paces its lane at the fastest desired speed found there
        for lane in 1..=world.lanes {
            let fastest = world
                .cars
                .iter()
                .filter(|c| c.lane == lane)
                .filter_map(desired_speed)
                .max_by(f64::total_cmp);
            for car in world.cars.iter_mut().filter(|c| c.lane == lane) {
                if let CarKind::Robot { driver, limits } = &mut car.kind {
                    let v0 = fastest.unwrap_or(car.v).min(limits.v_hi);
                    *driver = robot_idm(v0);
                }
            }
        }
        self.finished = true;
    }

    fn safety_specs(world: &WorldState, robots: &[(CarId, RobotDriver)], headway: f64, weight: f64) -> Vec<BarrierSpec> {
        robots
            .iter()
            .filter_map(|&(r, _)| {
                let lane = world.car(r).ok()?.lane;
                let lead = world.leader_of(r, lane).ok()??;
                Some(
                    BarrierSpec::new(
                        format!("headway_{r}"),
                        BarrierForm::GapLower {
                            front: lead,
                            back: r,
                            margin: headway + world.car_length,
                        },
                    )
                    .with_slack_weight(weight),
                )
            })
            .collect()
    }

    fn advance(&mut self, world: &mut WorldState) -> Result<()> {
        if let Some(phase) = &self.phase {
            let human = phase.human;
            let lane = world.car(human)?.lane;
            let timed_out = world.t - phase.start >= self.cfg.phase_timeout;
            if lane != phase.from || timed_out {
                if lane == phase.from {
                    self.phases_timed_out += 1;
                    self.queue.retain(|q| q.0 != human);
                }
                self.end_phase(world);
            }
        }
        while self.phase.is_none() {
            let Some(&(human, goal)) = self.queue.front() else {
                if !self.finished {
                    self.finish(world);
                }
                return Ok(());
            };
            if world.car(human)?.lane == goal {
                self.queue.pop_front();
                continue;
            }
            self.start_phase(world, human, goal)?;
        }
        Ok(())
    }
}

impl Supervisor for TrafficSupervisor {
    fn plan(&mut self, world: &mut WorldState) -> Vec<BarrierSpec> {
        if self.advance(world).is_err() {
            self.end_phase(world);
            self.queue.clear();
            return Vec::new();
        }
        match &self.phase {
            Some(phase) => {
                let mut specs = phase.specs.clone();
                specs.extend(Self::safety_specs(
                    world,
                    &phase.robots,
                    self.cfg.robot_headway,
                    self.cfg.headway_weight,
                ));
                specs
            }
            None => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlowMetrics {
    /// Mean velocity of every car, m/s.
    pub mean_velocity: f64,
    /// Mean `|v_desired - v|` over human drivers, m/s.
    pub mean_speed_deficit: f64,
}

pub fn flow_metrics(world: &WorldState) -> FlowMetrics {
    let n = world.cars.len() as f64;
    let mean_velocity = world.cars.iter().map(|c| c.v).sum::<f64>() / n;
    let deficits: Vec<f64> = world
        .cars
        .iter()
        .filter_map(|c| desired_speed(c).map(|v0| (v0 - c.v).abs()))
        .collect();
    FlowMetrics {
        mean_velocity,
        mean_speed_deficit: deficits.iter().sum::<f64>() / deficits.len() as f64,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficTrial {
    pub before: FlowMetrics,
    pub after: FlowMetrics,
    /// Every human ends in its assigned lane.
    pub sorted: bool,
    pub lane_changes: usize,
    pub phases_started: usize,
    pub phases_timed_out: usize,
    pub log: TrajectoryLog,
}

pub fn traffic_flow_trial(seed: u64, cfg: &TrafficFlowConfig) -> Result<TrafficTrial> {
    let setup = traffic_setup(seed, cfg)?;
    let sim = SimConfig {
        dt: cfg.dt,
        duration: cfg.duration,
        seed,
        // parameter noise is already part of the setup
        noise: cfg.noise.without_parameter_noise(),
        incentive_enabled: true,
        brake_floor: crate::cbf::DEFAULT_BRAKE_FLOOR,
    };
    let before = flow_metrics(&setup.world);
    let mut supervisor = TrafficSupervisor::new(&setup.assignment, *cfg);
    let log = run_supervised(setup.world, &mut supervisor, sim).map_err(|f| Error::Fault(f.to_string()))?;
    let after = flow_metrics(&log.final_world);
    let sorted = setup
        .assignment
        .iter()
        .all(|&(id, lane)| log.final_world.car(id).is_ok_and(|c| c.lane == lane));
    Ok(TrafficTrial {
        before,
        after,
        sorted,
        lane_changes: log.lane_events().count(),
        phases_started: supervisor.phases_started,
        phases_timed_out: supervisor.phases_timed_out,
        log,
    })
}
