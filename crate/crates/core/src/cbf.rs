//! Influence objectives as control-barrier constraints.
//!
//! Every barrier in the catalog is affine in car positions, velocities, or
//! human IDM accelerations, so it is stored as a weighted sum of
//! `(car, order)` terms. The ladder differentiates that sum until every
//! human term reaches the jerk level (where a leading robot's control enters
//! through the IDM chain rule) and every robot term reaches its control.
//! Jerk terms of humans without a robot leader fall back to the backward
//! difference `(f - a)/dt`, and a robot's control rate to `(u - a)/dt`.
//!
//! The constraint imposed is
//!
//! ```text
//!     ψ^(N) + c_{N-1} ψ^(N-1) + … + c_0 ψ ≥ 0
//! ```
//!
//! with `c_j = α_j / α_N` from the expansion of `(1 + p_1 s)⋯(1 + p_N s)`.

use nalgebra::{DMatrix, DVector};

use crate::behavior::{idm_accel, idm_partials, lambda_term, IdmParams, IdmPartials, Leader};
use crate::error::{Error, Result};
use crate::world::{CarId, CarKind, RobotDriver, WorldState};

/// Pole used for every order when a barrier does not list its own.
pub const DEFAULT_POLE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BarrierForm {
    VelocityUpper { car: CarId, v_max: f64 },
    VelocityLower { car: CarId, v_min: f64 },
    /// `p_front - p_back - margin ≥ 0` on raw positions.
    GapLower { front: CarId, back: CarId, margin: f64 },
    AccelLower { car: CarId, a_min: f64 },
    AccelUpper { car: CarId, a_max: f64 },
}

impl BarrierForm {
    pub fn cars(&self) -> Vec<CarId> {
        match *self {
            BarrierForm::VelocityUpper { car, .. }
            | BarrierForm::VelocityLower { car, .. }
            | BarrierForm::AccelLower { car, .. }
            | BarrierForm::AccelUpper { car, .. } => vec![car],
            BarrierForm::GapLower { front, back, .. } => vec![front, back],
        }
    }

    fn linear(&self) -> LinearForm {
        let t = |car, weight, order| Term { car, weight, order };
        match *self {
            BarrierForm::VelocityUpper { car, v_max } => LinearForm {
                terms: vec![t(car, -1.0, 1)],
                offset: v_max,
            },
            BarrierForm::VelocityLower { car, v_min } => LinearForm {
                terms: vec![t(car, 1.0, 1)],
                offset: -v_min,
            },
            BarrierForm::GapLower { front, back, margin } => LinearForm {
                terms: vec![t(front, 1.0, 0), t(back, -1.0, 0)],
                offset: -margin,
            },
            BarrierForm::AccelLower { car, a_min } => LinearForm {
                terms: vec![t(car, 1.0, 2)],
                offset: -a_min,
            },
            BarrierForm::AccelUpper { car, a_max } => LinearForm {
                terms: vec![t(car, -1.0, 2)],
                offset: a_max,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarrierSpec {
    pub name: String,
    pub form: BarrierForm,
    /// Empty means [`DEFAULT_POLE`] at every order.
    pub poles: Vec<f64>,
    pub enabled: bool,
    /// Relative cost of violating this barrier when the QP must be relaxed.
    pub slack_weight: f64,
}

impl BarrierSpec {
    pub fn new(name: impl Into<String>, form: BarrierForm) -> Self {
        Self {
            name: name.into(),
            form,
            poles: Vec::new(),
            enabled: true,
            slack_weight: 1.0,
        }
    }

    pub fn with_slack_weight(mut self, weight: f64) -> Self {
        self.slack_weight = weight;
        self
    }

    pub fn with_poles(mut self, poles: Vec<f64>) -> Self {
        self.poles = poles;
        self
    }

    fn assembly_error(&self, reason: impl Into<String>) -> Error {
        Error::Assembly {
            name: self.name.clone(),
            reason: reason.into(),
        }
    }
}

/// Derivative order of a state quantity: 0 position, 1 velocity, 2 acceleration.
#[derive(Debug, Clone, Copy)]
struct Term {
    car: CarId,
    weight: f64,
    order: u8,
}

#[derive(Debug, Clone)]
struct LinearForm {
    terms: Vec<Term>,
    offset: f64,
}

/// Coefficients of `(1 + p_1 s)⋯(1 + p_N s)` in ascending powers of `s`.
pub fn expand_poles(poles: &[f64]) -> Result<Vec<f64>> {
    let mut alpha = vec![1.0];
    for &p in poles {
        if !(p > 0.0 && p.is_finite()) {
            return Err(Error::invalid(format!("pole {p} must be positive")));
        }
        let mut next = vec![0.0; alpha.len() + 1];
        for (j, a) in alpha.iter().enumerate() {
            next[j] += a;
            next[j + 1] += p * a;
        }
        alpha = next;
    }
    Ok(alpha)
}

/// `α_j / α_N` for `j = 0..=N`, the last entry being 1.
pub fn ladder_coefficients(poles: &[f64]) -> Result<Vec<f64>> {
    let alpha = expand_poles(poles)?;
    let lead = *alpha.last().expect("expansion is never empty");
    Ok(alpha.iter().map(|a| a / lead).collect())
}

/// Direct coupling of a human to the robot it follows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectInfluence {
    pub robot: CarId,
    /// Column of the robot in the control vector.
    pub column: usize,
    pub partials: IdmPartials,
    pub lambda: f64,
}

/// Per-step quantities of one human driver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HumanTerms {
    /// Raw IDM output.
    pub f: f64,
    /// Acceleration to be applied this step (IDM clamped to the braking floor).
    pub a_cmd: f64,
    pub leader: Option<CarId>,
    pub influence: Option<DirectInfluence>,
}

/// IDM output clamped to `[-floor * b_max, a_max]`.
pub fn clamp_accel(f: f64, params: &IdmParams, floor: f64) -> f64 {
    f.clamp(-floor * params.b_max, params.a_max)
}

/// Everything the ladder reads from one world state.
#[derive(Debug, Clone)]
pub struct Snapshot<'w> {
    pub world: &'w WorldState,
    pub dt: f64,
    /// Robot ids in control-vector order.
    pub robots: Vec<CarId>,
    humans: Vec<Option<HumanTerms>>,
}

/// Default braking floor multiplier applied to `b_max`.
pub const DEFAULT_BRAKE_FLOOR: f64 = 3.0;

impl<'w> Snapshot<'w> {
    pub fn new(world: &'w WorldState, dt: f64) -> Result<Self> {
        Self::with_brake_floor(world, dt, DEFAULT_BRAKE_FLOOR)
    }

    pub fn with_brake_floor(world: &'w WorldState, dt: f64, floor: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::invalid("dt must be positive"));
        }
        let robots = world.robot_ids();
        let mut humans = Vec::with_capacity(world.cars.len());
        for car in &world.cars {
            let Some(h) = car.human() else {
                humans.push(None);
                continue;
            };
            let leader_id = world.leader_of(car.id, car.lane)?;
            let leader = leader_id.map(|l| world.car(l)).transpose()?;
            let f = idm_accel(car, leader.map(Leader::of), &h.idm, world.car_length)?;
            let a_cmd = clamp_accel(f, &h.idm, floor);
            let influence = match leader {
                Some(l) if l.kind.is_robot() => {
                    let partials = idm_partials(car, Leader::of(l), &h.idm, world.car_length)?;
                    Some(DirectInfluence {
                        robot: l.id,
                        column: robots.iter().position(|&r| r == l.id).expect("robot listed"),
                        lambda: lambda_term(&partials, car.v, a_cmd, l.v),
                        partials,
                    })
                }
                _ => None,
            };
            humans.push(Some(HumanTerms {
                f,
                a_cmd,
                leader: leader_id,
                influence,
            }));
        }
        Ok(Self {
            world,
            dt,
            robots,
            humans,
        })
    }

    pub fn human(&self, id: CarId) -> Result<Option<&HumanTerms>> {
        let i = self.world.index_of(id)?;
        Ok(self.humans[i].as_ref())
    }

    pub fn column_of(&self, id: CarId) -> Option<usize> {
        self.robots.iter().position(|&r| r == id)
    }

    /// Robots whose QP column is free (not driven by their own IDM).
    pub fn influence_robots(&self) -> Vec<CarId> {
        self.robots
            .iter()
            .copied()
            .filter(|&r| {
                matches!(
                    self.world.car(r).map(|c| c.kind),
                    Ok(CarKind::Robot { driver: RobotDriver::Influence, .. })
                )
            })
            .collect()
    }
}

/// Affine function `coeffs · u + constant` of the robot controls.
#[derive(Debug, Clone, PartialEq)]
struct Affine {
    coeffs: Vec<f64>,
    constant: f64,
    has_control: bool,
}

impl Affine {
    fn constant(n: usize, c: f64) -> Self {
        Self {
            coeffs: vec![0.0; n],
            constant: c,
            has_control: false,
        }
    }

    fn control(n: usize, column: usize, coeff: f64, constant: f64) -> Self {
        let mut a = Self::constant(n, constant);
        a.coeffs[column] = coeff;
        a.has_control = true;
        a
    }

    fn add_scaled(&mut self, other: &Affine, w: f64) {
        for (c, o) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *c += w * o;
        }
        self.constant += w * other.constant;
        self.has_control |= other.has_control;
    }

    fn eval(&self, u: &[f64]) -> f64 {
        self.constant + self.coeffs.iter().zip(u).map(|(c, x)| c * x).sum::<f64>()
    }
}

/// One linear constraint `coeffs · u ≥ rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintRow {
    pub name: String,
    pub coeffs: Vec<f64>,
    pub rhs: f64,
    pub psi: f64,
    /// `ψ, ψ̇, …, ψ^(N-1)` at the current state, robot controls taken at
    /// their last applied accelerations.
    pub derivatives: Vec<f64>,
    pub relative_degree: usize,
    /// Normalized ladder coefficients `c_0..c_N`.
    pub ladder: Vec<f64>,
    pub slack_weight: f64,
}

impl ConstraintRow {
    /// `coeffs · u - rhs`; the barrier holds when this is non-negative.
    pub fn margin(&self, u: &[f64]) -> f64 {
        self.coeffs.iter().zip(u).map(|(c, x)| c * x).sum::<f64>() - self.rhs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSystem {
    pub robots: Vec<CarId>,
    pub rows: Vec<ConstraintRow>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub weights: DVector<f64>,
}

impl ConstraintSystem {
    pub fn from_rows(robots: Vec<CarId>, rows: Vec<ConstraintRow>) -> Self {
        let n = robots.len();
        let a = DMatrix::from_fn(rows.len(), n, |i, j| rows[i].coeffs[j]);
        let b = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.rhs));
        let weights = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.slack_weight));
        Self {
            robots,
            rows,
            a,
            b,
            weights,
        }
    }
}

fn term_derivative(snap: &Snapshot, term: &Term, k: usize, spec: &BarrierSpec) -> Result<Affine> {
    let n = snap.robots.len();
    let car = snap.world.car(term.car)?;
    let order = term.order as usize + k;
    let unsupported = || spec.assembly_error(format!("derivative order {order} of car {} unsupported", car.id));
    Ok(match car.kind {
        CarKind::Background => match order {
            0 => Affine::constant(n, car.p),
            1 => Affine::constant(n, car.v),
            _ => Affine::constant(n, 0.0),
        },
        CarKind::Robot { .. } => {
            let col = snap.column_of(car.id).expect("robot has a column");
            match order {
                0 => Affine::constant(n, car.p),
                1 => Affine::constant(n, car.v),
                2 => Affine::control(n, col, 1.0, 0.0),
                3 => Affine::control(n, col, 1.0 / snap.dt, -car.a / snap.dt),
                _ => return Err(unsupported()),
            }
        }
        CarKind::Human(_) => {
            let h = snap.human(car.id)?.expect("human terms exist");
            match order {
                0 => Affine::constant(n, car.p),
                1 => Affine::constant(n, car.v),
                2 => Affine::constant(n, h.f),
                3 => match h.influence {
                    Some(d) => Affine::control(n, d.column, d.partials.df_dv_leader, d.lambda),
                    None => Affine::constant(n, (h.f - car.a) / snap.dt),
                },
                _ => return Err(unsupported()),
            }
        }
    })
}

fn relative_degree(snap: &Snapshot, form: &LinearForm) -> Result<usize> {
    let mut degree = 0usize;
    for t in &form.terms {
        let target = match snap.world.car(t.car)?.kind {
            CarKind::Human(_) => 3usize,
            CarKind::Robot { .. } => 2,
            CarKind::Background => continue,
        };
        degree = degree.max(target.saturating_sub(t.order as usize));
    }
    Ok(degree)
}

fn derivative(snap: &Snapshot, form: &LinearForm, k: usize, spec: &BarrierSpec) -> Result<Affine> {
    let mut acc = Affine::constant(snap.robots.len(), if k == 0 { form.offset } else { 0.0 });
    for t in &form.terms {
        acc.add_scaled(&term_derivative(snap, t, k, spec)?, t.weight);
    }
    Ok(acc)
}

/// Current value of ψ; non-negative when the objective holds.
pub fn psi_value(spec: &BarrierSpec, world: &WorldState) -> Result<f64> {
    let snap = Snapshot::new(world, 1.0)?;
    psi_in(spec, &snap)
}

pub fn psi_in(spec: &BarrierSpec, snap: &Snapshot) -> Result<f64> {
    let form = spec.form.linear();
    let current: Vec<f64> = snap
        .robots
        .iter()
        .map(|&r| snap.world.car(r).map(|c| c.a))
        .collect::<Result<_>>()?;
    Ok(derivative(snap, &form, 0, spec)?.eval(&current))
}

/// Builds the constraint row of one barrier.
pub fn assemble_row(spec: &BarrierSpec, world: &WorldState, dt: f64) -> Result<ConstraintRow> {
    let snap = Snapshot::new(world, dt)?;
    assemble_row_in(spec, &snap)
}

pub fn assemble_row_in(spec: &BarrierSpec, snap: &Snapshot) -> Result<ConstraintRow> {
    let form = spec.form.linear();
    let degree = relative_degree(snap, &form)?;
    let poles = if spec.poles.is_empty() {
        vec![DEFAULT_POLE; degree]
    } else if spec.poles.len() == degree {
        spec.poles.clone()
    } else {
        return Err(spec.assembly_error(format!(
            "{} poles given for relative degree {degree}",
            spec.poles.len()
        )));
    };
    let ladder = ladder_coefficients(&poles)?;

    let current: Vec<f64> = snap
        .robots
        .iter()
        .map(|&r| snap.world.car(r).map(|c| c.a))
        .collect::<Result<_>>()?;
    let mut g = Affine::constant(snap.robots.len(), 0.0);
    let mut derivatives = Vec::with_capacity(degree);
    for (k, c) in ladder.iter().enumerate() {
        let d = derivative(snap, &form, k, spec)?;
        if k < degree {
            derivatives.push(d.eval(&current));
        }
        g.add_scaled(&d, *c);
    }
    if !g.has_control {
        return Err(Error::Unreachable(spec.name.clone()));
    }
    Ok(ConstraintRow {
        name: spec.name.clone(),
        coeffs: g.coeffs,
        rhs: -g.constant,
        psi: derivative(snap, &form, 0, spec)?.eval(&current),
        derivatives,
        relative_degree: degree,
        ladder,
        slack_weight: spec.slack_weight,
    })
}

/// Stacks the rows of all enabled barriers in input order.
pub fn assemble_system(specs: &[BarrierSpec], world: &WorldState, dt: f64) -> Result<ConstraintSystem> {
    let snap = Snapshot::new(world, dt)?;
    assemble_system_in(specs, &snap)
}

pub fn assemble_system_in(specs: &[BarrierSpec], snap: &Snapshot) -> Result<ConstraintSystem> {
    let rows = specs
        .iter()
        .filter(|s| s.enabled)
        .map(|s| assemble_row_in(s, snap))
        .collect::<Result<Vec<_>>>()?;
    Ok(ConstraintSystem::from_rows(snap.robots.clone(), rows))
}
