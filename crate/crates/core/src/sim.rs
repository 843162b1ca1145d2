//! Closed-loop simulation: human IDM and lane decisions, the influence QP for
//! robots, noise injection, explicit Euler integration, and logging.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::behavior::{idm_accel, lane_decision, Leader};
use crate::cbf::{assemble_row_in, psi_in, BarrierSpec, ConstraintSystem, Snapshot, DEFAULT_BRAKE_FLOOR};
use crate::error::{Error, Result};
use crate::qp::{solve_qp, QpProblem, QpSolution, QpStatus};
use crate::world::{CarId, CarKind, RobotDriver, WorldState};

/// Gaussian noise standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Jam distance, m.
    pub sd_s0: f64,
    /// Desired velocity, m/s.
    pub sd_v0: f64,
    /// Maximum acceleration, deceleration and time headway.
    pub sd_abt: f64,
    /// Per-step additive noise on human accelerations, m/s².
    pub sd_control: f64,
    /// Also perturb background cars' (otherwise zero) acceleration.
    pub background_control: bool,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.sd_s0, self.sd_v0, self.sd_abt, self.sd_control]
            .iter()
            .all(|x| *x >= 0.0 && x.is_finite())
        {
            Ok(())
        } else {
            Err(Error::invalid("noise standard deviations must be non-negative"))
        }
    }

    pub fn without_parameter_noise(self) -> Self {
        Self {
            sd_s0: 0.0,
            sd_v0: 0.0,
            sd_abt: 0.0,
            ..self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub duration: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default = "default_true")]
    pub incentive_enabled: bool,
    /// Human braking is floored at `-brake_floor * b_max`.
    #[serde(default = "default_brake_floor")]
    pub brake_floor: f64,
}

fn default_dt() -> f64 {
    0.01
}

fn default_true() -> bool {
    true
}

fn default_brake_floor() -> f64 {
    DEFAULT_BRAKE_FLOOR
}

impl SimConfig {
    pub fn new(duration: f64) -> Self {
        Self {
            dt: default_dt(),
            duration,
            seed: 0,
            noise: NoiseConfig::default(),
            incentive_enabled: true,
            brake_floor: DEFAULT_BRAKE_FLOOR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.duration > 0.0 && self.brake_floor > 0.0) {
            return Err(Error::invalid("dt, duration and brake floor must be positive"));
        }
        self.noise.validate()
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }
}

/// Per-car random streams, independent of how many other cars exist.
fn stream(seed: u64, car: CarId, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((car.0 as u64) << 2) | purpose);
    rng
}

const PARAM_STREAM: u64 = 0;
const CONTROL_STREAM: u64 = 1;

fn perturb(value: f64, sd: f64, rng: &mut ChaCha8Rng) -> f64 {
    if sd <= 0.0 {
        return value;
    }
    let noisy = value + Normal::new(0.0, sd).expect("finite sd").sample(rng);
    // parameters stay positive
    noisy.max(0.1 * value)
}

/// Draws one parameter perturbation per human driver.
pub fn perturb_parameters(world: &mut WorldState, noise: &NoiseConfig, seed: u64) {
    for car in &mut world.cars {
        let id = car.id;
        if let CarKind::Human(h) = &mut car.kind {
            let mut rng = stream(seed, id, PARAM_STREAM);
            let p = &mut h.idm;
            p.s0 = perturb(p.s0, noise.sd_s0, &mut rng);
            p.v0 = perturb(p.v0, noise.sd_v0, &mut rng);
            p.a_max = perturb(p.a_max, noise.sd_abt, &mut rng);
            p.b_max = perturb(p.b_max, noise.sd_abt, &mut rng);
            p.headway = perturb(p.headway, noise.sd_abt, &mut rng);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CarRecord {
    pub id: CarId,
    pub kind: &'static str,
    pub lane: u32,
    pub p: f64,
    pub v: f64,
    /// Acceleration applied over this step.
    pub a: f64,
    /// Robot control from the QP.
    pub u: Option<f64>,
    /// Noise-free command: clamped IDM for humans, `u` for robots.
    pub a_cmd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarrierRecord {
    pub name: String,
    pub psi: f64,
    /// `coeffs · u - rhs` at the applied controls; `None` if the row was dropped.
    pub margin: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneEvent {
    pub car: CarId,
    pub from: u32,
    pub to: u32,
    /// Time at which the new lane takes effect.
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub cars: Vec<CarRecord>,
    pub barriers: Vec<BarrierRecord>,
    pub qp_status: QpStatus,
    pub lane_events: Vec<LaneEvent>,
    /// Barriers skipped this step because no robot control reached them.
    pub dropped: Vec<String>,
}

impl StepRecord {
    pub fn car(&self, id: CarId) -> Option<&CarRecord> {
        self.cars.iter().find(|c| c.id == id)
    }

    pub fn barrier(&self, name: &str) -> Option<&BarrierRecord> {
        self.barriers.iter().find(|b| b.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub dt: f64,
    pub steps: Vec<StepRecord>,
    pub final_world: WorldState,
}

impl TrajectoryLog {
    pub fn lane_events(&self) -> impl Iterator<Item = &LaneEvent> {
        self.steps.iter().flat_map(|s| s.lane_events.iter())
    }

    pub fn psi_series(&self, name: &str) -> Vec<(f64, f64)> {
        self.steps
            .iter()
            .filter_map(|s| s.barrier(name).map(|b| (s.t, b.psi)))
            .collect()
    }
}

/// A failed rollout together with everything logged before the fault.
#[derive(Debug, thiserror::Error)]
#[error("simulation fault at t = {t:.2} s: {error}")]
pub struct SimFault {
    pub t: f64,
    pub error: Error,
    pub log: Box<TrajectoryLog>,
}

/// Chooses the barriers for each step; may also retask robots.
pub trait Supervisor {
    fn plan(&mut self, world: &mut WorldState) -> Vec<BarrierSpec>;
}

/// A fixed barrier list.
#[derive(Debug, Clone)]
pub struct FixedBarriers(pub Vec<BarrierSpec>);

impl Supervisor for FixedBarriers {
    fn plan(&mut self, _world: &mut WorldState) -> Vec<BarrierSpec> {
        self.0.clone()
    }
}

/// The control problem of one step, assembled without advancing the world.
#[derive(Debug, Clone, PartialEq)]
pub struct Derivation {
    pub t: f64,
    pub system: ConstraintSystem,
    pub problem: QpProblem,
    pub solution: QpSolution,
}

pub struct Simulator {
    cfg: SimConfig,
    world: WorldState,
    step_index: usize,
    control_noise: BTreeMap<CarId, ChaCha8Rng>,
}

impl Simulator {
    /// Validates inputs and applies the once-per-trial parameter noise.
    pub fn new(mut initial: WorldState, cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        initial.validate()?;
        perturb_parameters(&mut initial, &cfg.noise, cfg.seed);
        let control_noise = initial
            .cars
            .iter()
            .map(|c| (c.id, stream(cfg.seed, c.id, CONTROL_STREAM)))
            .collect();
        Ok(Self {
            cfg,
            world: initial,
            step_index: 0,
            control_noise,
        })
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn world_mut(&mut self) -> &mut WorldState {
        &mut self.world
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    fn robot_box(&self, snap: &Snapshot) -> Result<(DVector<f64>, DVector<f64>)> {
        let dt = self.cfg.dt;
        let n = snap.robots.len();
        let (mut lo, mut hi) = (DVector::zeros(n), DVector::zeros(n));
        for (k, &id) in snap.robots.iter().enumerate() {
            let car = self.world.car(id)?;
            let CarKind::Robot { limits, driver } = car.kind else {
                unreachable!("robot list holds robots")
            };
            // acceleration limits, tightened so v stays inside [v_lo, v_hi]
            let l = limits.a_lo.max((limits.v_lo - car.v) / dt).min(0.0);
            let h = limits.a_hi.min((limits.v_hi - car.v) / dt).max(0.0);
            match driver {
                RobotDriver::Influence => {
                    lo[k] = l;
                    hi[k] = h;
                }
                RobotDriver::Idm(params) => {
                    let leader = self.world.leader_of(id, car.lane)?;
                    let leader = leader.map(|l| self.world.car(l).map(Leader::of)).transpose()?;
                    let a = idm_accel(car, leader, &params, self.world.car_length)?.clamp(l, h);
                    lo[k] = a;
                    hi[k] = a;
                }
            }
        }
        Ok((lo, hi))
    }

    fn noise(&mut self, id: CarId) -> f64 {
        let sd = self.cfg.noise.sd_control;
        if sd <= 0.0 {
            return 0.0;
        }
        let rng = self.control_noise.get_mut(&id).expect("stream per car");
        Normal::new(0.0, sd).expect("finite sd").sample(rng)
    }

    /// Assembles and solves the current step's QP; any barrier that cannot be
    /// assembled is an error here rather than a dropped row.
    pub fn derive(&self, specs: &[BarrierSpec]) -> Result<Derivation> {
        let snap = Snapshot::with_brake_floor(&self.world, self.cfg.dt, self.cfg.brake_floor)?;
        let rows = specs
            .iter()
            .filter(|s| s.enabled)
            .map(|spec| {
                assemble_row_in(spec, &snap).map_err(|e| match e {
                    Error::Unreachable(name) => Error::Assembly {
                        name,
                        reason: "no robot control reaches this barrier".into(),
                    },
                    e => e,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let system = ConstraintSystem::from_rows(snap.robots.clone(), rows);
        let (lo, hi) = self.robot_box(&snap)?;
        let problem = QpProblem::new(system.a.clone(), system.b.clone(), lo, hi).with_weights(system.weights.clone());
        let solution = solve_qp(&problem)?;
        Ok(Derivation {
            t: self.step_index as f64 * self.cfg.dt,
            system,
            problem,
            solution,
        })
    }

    /// Advances one step under the given barriers.
    pub fn step(&mut self, specs: &[BarrierSpec]) -> Result<StepRecord> {
        let dt = self.cfg.dt;
        let t = self.step_index as f64 * dt;
        self.world.t = t;

        // (1) human accelerations and (2) the influence QP
        let snap = Snapshot::with_brake_floor(&self.world, dt, self.cfg.brake_floor)?;
        let mut rows = Vec::new();
        let mut barriers = Vec::new();
        let mut dropped = Vec::new();
        for spec in specs.iter().filter(|s| s.enabled) {
            match assemble_row_in(spec, &snap) {
                Ok(row) => rows.push(row),
                Err(Error::Unreachable(name)) => {
                    barriers.push(BarrierRecord {
                        name: name.clone(),
                        psi: psi_in(spec, &snap)?,
                        margin: None,
                    });
                    dropped.push(name);
                }
                Err(e) => return Err(e),
            }
        }
        let system = ConstraintSystem::from_rows(snap.robots.clone(), rows);
        let (lo, hi) = self.robot_box(&snap)?;
        let problem = QpProblem::new(system.a.clone(), system.b.clone(), lo.clone(), hi.clone())
            .with_weights(system.weights.clone());
        let solution = solve_qp(&problem)?;
        let u: Vec<f64> = match solution.status {
            QpStatus::Failed => snap
                .robots
                .iter()
                .enumerate()
                .map(|(k, &r)| Ok(self.world.car(r)?.a.clamp(lo[k], hi[k])))
                .collect::<Result<_>>()?,
            _ => solution.u.iter().copied().collect(),
        };
        for row in &system.rows {
            barriers.push(BarrierRecord {
                name: row.name.clone(),
                psi: row.psi,
                margin: Some(row.margin(&u)),
            });
        }

        let commands: Vec<(f64, Option<f64>)> = self
            .world
            .cars
            .iter()
            .map(|car| match car.kind {
                CarKind::Human(_) => Ok((snap.human(car.id)?.expect("human").a_cmd, None)),
                CarKind::Robot { .. } => {
                    let k = snap.column_of(car.id).expect("robot column");
                    Ok((u[k], Some(u[k])))
                }
                CarKind::Background => Ok((0.0, None)),
            })
            .collect::<Result<_>>()?;
        drop(snap);

        // (3) control noise
        let mut applied = Vec::with_capacity(commands.len());
        for (i, &(cmd, _)) in commands.iter().enumerate() {
            let (id, kind) = (self.world.cars[i].id, self.world.cars[i].kind);
            let a = match kind {
                CarKind::Human(_) => cmd + self.noise(id),
                CarKind::Background if self.cfg.noise.background_control => self.noise(id),
                _ => cmd,
            };
            applied.push(a);
        }

        let cars = self
            .world
            .cars
            .iter()
            .zip(&commands)
            .zip(&applied)
            .map(|((car, &(cmd, u)), &a)| CarRecord {
                id: car.id,
                kind: car.kind.label(),
                lane: car.lane,
                p: car.p,
                v: car.v,
                a,
                u,
                a_cmd: cmd,
            })
            .collect();

        // (4) explicit Euler, position first
        for (car, &a) in self.world.cars.iter_mut().zip(&applied) {
            car.p += car.v * dt;
            car.v += a * dt;
            car.a = a;
            match car.kind {
                CarKind::Robot { limits, .. } => car.v = car.v.clamp(limits.v_lo, limits.v_hi),
                _ => car.v = car.v.max(0.0),
            }
            car.lc_cooldown = (car.lc_cooldown - dt).max(0.0);
        }
        self.step_index += 1;
        let t_next = self.step_index as f64 * dt;
        self.world.t = t_next;

        // (5) lane decisions, one car at a time so two merges cannot claim the same gap
        let mut lane_events = Vec::new();
        let humans: Vec<CarId> = self.world.cars.iter().filter(|c| c.kind.is_human()).map(|c| c.id).collect();
        for id in humans {
            let d = lane_decision(&self.world, id, self.cfg.incentive_enabled)?;
            if d == 0 {
                continue;
            }
            let car = self.world.car_mut(id)?;
            let from = car.lane;
            car.lane = (from as i64 + d as i64) as u32;
            if let CarKind::Human(h) = &car.kind {
                car.lc_cooldown = h.lane_change.cooldown;
            }
            lane_events.push(LaneEvent {
                car: id,
                from,
                to: car.lane,
                t: t_next,
            });
        }

        if let Some((back, front)) = self.world.first_collision() {
            return Err(Error::Geometry(format!(
                "collision between car {back} and car {front} at t = {t_next:.2} s"
            )));
        }

        Ok(StepRecord {
            t,
            cars,
            barriers,
            qp_status: solution.status,
            lane_events,
            dropped,
        })
    }
}

/// Runs a rollout under a fixed barrier list.
pub fn run(initial: WorldState, specs: &[BarrierSpec], cfg: SimConfig) -> Result<TrajectoryLog, SimFault> {
    run_supervised(initial, &mut FixedBarriers(specs.to_vec()), cfg)
}

/// Runs a rollout whose barriers are chosen per step by `supervisor`.
pub fn run_supervised(
    initial: WorldState,
    supervisor: &mut dyn Supervisor,
    cfg: SimConfig,
) -> Result<TrajectoryLog, SimFault> {
    let fault = |error, world: WorldState, steps| SimFault {
        t: world.t,
        error,
        log: Box::new(TrajectoryLog {
            dt: cfg.dt,
            steps,
            final_world: world,
        }),
    };
    let mut sim = match Simulator::new(initial.clone(), cfg) {
        Ok(sim) => sim,
        Err(e) => return Err(fault(e, initial, Vec::new())),
    };
    let n = cfg.steps();
    let mut steps = Vec::with_capacity(n);
    for _ in 0..n {
        let specs = supervisor.plan(sim.world_mut());
        match sim.step(&specs) {
            Ok(record) => steps.push(record),
            Err(e) => return Err(fault(e, sim.world.clone(), steps)),
        }
    }
    Ok(TrajectoryLog {
        dt: cfg.dt,
        steps,
        final_world: sim.world,
    })
}

/// Formats `x` with nine significant digits in plain decimal notation.
pub fn fmt_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let sci = format!("{:.8e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    let negative = mantissa.starts_with('-');
    let digits: String = mantissa.chars().filter(|c| c.is_ascii_digit()).collect();
    let point = exp + 1; // digits before the decimal point
    let mut out = String::new();
    if negative {
        out.push('-');
    }
    if point <= 0 {
        out.push_str("0.");
        out.extend(std::iter::repeat_n('0', (-point) as usize));
        out.push_str(&digits);
    } else if point as usize >= digits.len() {
        out.push_str(&digits);
        out.extend(std::iter::repeat_n('0', point as usize - digits.len()));
    } else {
        out.push_str(&digits[..point as usize]);
        out.push('.');
        out.push_str(&digits[point as usize..]);
    }
    if out.contains('.') {
        let trimmed = out.trim_end_matches('0').trim_end_matches('.');
        out = trimmed.to_string();
    }
    out
}

/// Writes `t,car_id,kind,lane,p,v,a,u`, one row per car per step.
pub fn write_trajectory_csv(log: &TrajectoryLog, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "t,car_id,kind,lane,p,v,a,u")?;
    for s in &log.steps {
        let t = fmt_sig9(s.t);
        for c in &s.cars {
            let u = c.u.map(fmt_sig9).unwrap_or_default();
            writeln!(
                out,
                "{t},{},{},{},{},{},{},{u}",
                c.id,
                c.kind,
                c.lane,
                fmt_sig9(c.p),
                fmt_sig9(c.v),
                fmt_sig9(c.a)
            )?;
        }
    }
    Ok(())
}

/// Writes `t,barrier_name,psi,qp_status`, one row per barrier per step.
pub fn write_barrier_csv(log: &TrajectoryLog, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "t,barrier_name,psi,qp_status")?;
    for s in &log.steps {
        let t = fmt_sig9(s.t);
        for b in &s.barriers {
            let status = if b.margin.is_none() { "dropped" } else { s.qp_status.as_str() };
            writeln!(out, "{t},{},{},{status}", b.name, fmt_sig9(b.psi))?;
        }
    }
    Ok(())
}
