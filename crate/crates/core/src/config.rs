//! JSON scenario files: schema, validation and conversion to domain types.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::behavior::{IdmParams, LaneChangeParams};
use crate::cbf::{BarrierForm, BarrierSpec};
use crate::error::{Error, Result};
use crate::sim::{SimConfig, TrajectoryLog};
use crate::world::{CarId, CarKind, ControlLimits, HumanDriver, RobotDriver, VehicleState, WorldState, DEFAULT_CAR_LENGTH};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub lanes: u32,
    #[serde(default = "default_car_length")]
    pub car_length: f64,
    /// Named IDM parameter sets, merged over the built-in `normal` and `aggressive`.
    #[serde(default)]
    pub parameter_sets: BTreeMap<String, IdmParams>,
    pub cars: Vec<CarEntry>,
    #[serde(default)]
    pub barriers: Vec<BarrierEntry>,
    pub sim: SimConfig,
    #[serde(default)]
    pub success: Option<Success>,
}

fn default_car_length() -> f64 {
    DEFAULT_CAR_LENGTH
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CarEntry {
    Human {
        id: u32,
        lane: u32,
        p: f64,
        v: f64,
        #[serde(default)]
        idm: IdmEntry,
        #[serde(default)]
        lane_change: LaneChangeParams,
    },
    Robot {
        id: u32,
        lane: u32,
        p: f64,
        v: f64,
        #[serde(default)]
        limits: ControlLimits,
        /// Parameter set name; when present the robot drives by IDM.
        #[serde(default)]
        idm: Option<IdmEntry>,
    },
    Background {
        id: u32,
        lane: u32,
        p: f64,
        v: f64,
    },
}

/// A parameter set by name with optional per-field overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdmEntry {
    #[serde(default = "default_set")]
    pub base: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub headway: Option<f64>,
}

fn default_set() -> String {
    "normal".into()
}

impl Default for IdmEntry {
    fn default() -> Self {
        Self {
            base: default_set(),
            a_max: None,
            b_max: None,
            v0: None,
            s0: None,
            headway: None,
        }
    }
}

impl IdmEntry {
    fn resolve(&self, sets: &BTreeMap<String, IdmParams>, field: &str) -> Result<IdmParams> {
        let mut p = *sets
            .get(&self.base)
            .ok_or_else(|| Error::Config(format!("{field}.base: unknown parameter set `{}`", self.base)))?;
        p.a_max = self.a_max.unwrap_or(p.a_max);
        p.b_max = self.b_max.unwrap_or(p.b_max);
        p.v0 = self.v0.unwrap_or(p.v0);
        p.s0 = self.s0.unwrap_or(p.s0);
        p.headway = self.headway.unwrap_or(p.headway);
        p.validate().map_err(|e| Error::Config(format!("{field}: {e}")))?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarrierEntry {
    pub name: String,
    pub form: FormEntry,
    /// One positive pole per derivative order; defaults to all ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poles: Option<Vec<f64>>,
    #[serde(default = "default_true")]
    pub enabled: bool,
    /// Relative cost of violating this barrier when the QP is relaxed.
    #[serde(default = "default_weight")]
    pub slack_weight: f64,
}

fn default_weight() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FormEntry {
    VelocityUpper { car: u32, v_max: f64 },
    VelocityLower { car: u32, v_min: f64 },
    GapLower { front: u32, back: u32, margin: f64 },
    AccelLower { car: u32, a_min: f64 },
    AccelUpper { car: u32, a_max: f64 },
}

impl From<FormEntry> for BarrierForm {
    fn from(f: FormEntry) -> Self {
        match f {
            FormEntry::VelocityUpper { car, v_max } => BarrierForm::VelocityUpper { car: CarId(car), v_max },
            FormEntry::VelocityLower { car, v_min } => BarrierForm::VelocityLower { car: CarId(car), v_min },
            FormEntry::GapLower { front, back, margin } => BarrierForm::GapLower {
                front: CarId(front),
                back: CarId(back),
                margin,
            },
            FormEntry::AccelLower { car, a_min } => BarrierForm::AccelLower { car: CarId(car), a_min },
            FormEntry::AccelUpper { car, a_max } => BarrierForm::AccelUpper { car: CarId(car), a_max },
        }
    }
}

const SETTLE_WINDOW: f64 = 10.0;
const SETTLE_TOL: f64 = 1e-3;

/// Success predicate evaluated on a finished rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Success {
    /// `car` moves into lane `to`, optionally landing between two cars.
    LaneChange {
        car: u32,
        to: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        between: Option<[u32; 2]>,
    },
    /// Every named barrier stays satisfied, within 1e-3, over the last 10 s.
    BarriersHold(Vec<String>),
    All(Vec<Success>),
}

impl Success {
    pub fn evaluate(&self, log: &TrajectoryLog) -> bool {
        match self {
            Success::LaneChange { car, to, between } => {
                let Some(ev) = log.lane_events().find(|e| e.car == CarId(*car) && e.to == *to) else {
                    return false;
                };
                let Some([front, back]) = between else {
                    return true;
                };
                // positions are logged before each step; the event lands at the end of it
                let Some(step) = log.steps.iter().rev().find(|s| s.t < ev.t) else {
                    return false;
                };
                let pos = |id: u32| step.car(CarId(id)).map(|c| (c.p, c.lane));
                match (pos(*car), pos(*front), pos(*back)) {
                    (Some((p, _)), Some((pf, lf)), Some((pb, lb))) => {
                        lf == *to && lb == *to && pf > p && p > pb
                    }
                    _ => false,
                }
            }
            Success::BarriersHold(names) => {
                let Some(end) = log.steps.last().map(|s| s.t) else {
                    return false;
                };
                names.iter().all(|n| {
                    let series = log.psi_series(n);
                    !series.is_empty()
                        && series
                            .iter()
                            .filter(|(t, _)| *t >= end - SETTLE_WINDOW)
                            .all(|&(_, psi)| psi >= -SETTLE_TOL)
                })
            }
            Success::All(parts) => parts.iter().all(|p| p.evaluate(log)),
        }
    }
}

/// A validated, ready-to-run scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    pub world: WorldState,
    pub specs: Vec<BarrierSpec>,
    pub sim: SimConfig,
    pub success: Option<Success>,
}

/// Built-in parameter sets available to every scenario file.
pub fn builtin_parameter_sets() -> BTreeMap<String, IdmParams> {
    BTreeMap::from([
        ("normal".to_string(), IdmParams::NORMAL),
        ("aggressive".to_string(), IdmParams::AGGRESSIVE),
    ])
}

impl ScenarioFile {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Resolves parameter sets and checks every cross-reference.
    pub fn build(&self) -> Result<Scenario> {
        let mut sets = builtin_parameter_sets();
        sets.extend(self.parameter_sets.iter().map(|(k, v)| (k.clone(), *v)));
        for (name, p) in &self.parameter_sets {
            p.validate()
                .map_err(|e| Error::Config(format!("parameter_sets.{name}: {e}")))?;
        }

        let mut cars = Vec::with_capacity(self.cars.len());
        for (i, entry) in self.cars.iter().enumerate() {
            let field = format!("cars[{i}]");
            let car = match entry {
                CarEntry::Human {
                    id,
                    lane,
                    p,
                    v,
                    idm,
                    lane_change,
                } => {
                    lane_change
                        .validate()
                        .map_err(|e| Error::Config(format!("{field}.lane_change: {e}")))?;
                    let driver = HumanDriver {
                        idm: idm.resolve(&sets, &format!("{field}.idm"))?,
                        lane_change: *lane_change,
                    };
                    VehicleState::new(*id, CarKind::Human(driver), *lane, *p, *v)
                }
                CarEntry::Robot {
                    id,
                    lane,
                    p,
                    v,
                    limits,
                    idm,
                } => {
                    let driver = match idm {
                        Some(entry) => RobotDriver::Idm(entry.resolve(&sets, &format!("{field}.idm"))?),
                        None => RobotDriver::Influence,
                    };
                    VehicleState::new(
                        *id,
                        CarKind::Robot {
                            limits: *limits,
                            driver,
                        },
                        *lane,
                        *p,
                        *v,
                    )
                }
                CarEntry::Background { id, lane, p, v } => VehicleState::new(*id, CarKind::Background, *lane, *p, *v),
            };
            cars.push(car);
        }
        let mut world = WorldState::new(self.lanes, cars);
        world.car_length = self.car_length;
        world.validate().map_err(|e| Error::Config(format!("cars: {e}")))?;

        let mut specs = Vec::with_capacity(self.barriers.len());
        for (i, b) in self.barriers.iter().enumerate() {
            let form = BarrierForm::from(b.form);
            for id in form.cars() {
                world
                    .car(id)
                    .map_err(|_| Error::Config(format!("barriers[{i}].form: unknown car id {id}")))?;
            }
            if specs.iter().any(|s: &BarrierSpec| s.name == b.name) {
                return Err(Error::Config(format!("barriers[{i}].name: duplicate `{}`", b.name)));
            }
            let mut spec = BarrierSpec::new(b.name.clone(), form);
            if let Some(poles) = &b.poles {
                if poles.is_empty() || poles.iter().any(|p| !(*p > 0.0)) {
                    return Err(Error::Config(format!("barriers[{i}].poles: poles must be positive")));
                }
                spec = spec.with_poles(poles.clone());
            }
            if !(b.slack_weight > 0.0 && b.slack_weight.is_finite()) {
                return Err(Error::Config(format!("barriers[{i}].slack_weight: must be positive")));
            }
            spec.enabled = b.enabled;
            spec.slack_weight = b.slack_weight;
            specs.push(spec);
        }

        self.sim.validate().map_err(|e| Error::Config(format!("sim: {e}")))?;
        if let Some(success) = &self.success {
            check_success(success, &world)?;
        }
        Ok(Scenario {
            name: self.name.clone(),
            description: self.description.clone(),
            world,
            specs,
            sim: self.sim,
            success: self.success.clone(),
        })
    }
}

fn check_success(s: &Success, world: &WorldState) -> Result<()> {
    let known = |id: u32| {
        world
            .car(CarId(id))
            .map(|_| ())
            .map_err(|_| Error::Config(format!("success: unknown car id {id}")))
    };
    match s {
        Success::LaneChange { car, to, between } => {
            known(*car)?;
            world.check_lane(*to).map_err(|e| Error::Config(format!("success.to: {e}")))?;
            if let Some([a, b]) = between {
                known(*a)?;
                known(*b)?;
            }
            Ok(())
        }
        Success::BarriersHold(_) => Ok(()),
        Success::All(parts) => parts.iter().try_for_each(|p| check_success(p, world)),
    }
}
