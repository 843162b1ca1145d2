//! Runs many seeded trials of a case study in parallel and summarizes them
//! with paired t-tests.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::sim::fmt_sig9;
use crate::studies::aggression::{aggression_trial, AggressionConfig};
use crate::studies::stats::{paired_t_test, TTest};
use crate::studies::traffic::{traffic_flow_trial, TrafficFlowConfig};

/// Largest share of faulted trials a study tolerates.
pub const MAX_FAULT_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaseStudy {
    TrafficFlow,
    Aggression,
}

impl CaseStudy {
    pub fn name(self) -> &'static str {
        match self {
            CaseStudy::TrafficFlow => "traffic-flow",
            CaseStudy::Aggression => "aggression",
        }
    }

    fn columns(self) -> &'static [&'static str] {
        match self {
            CaseStudy::TrafficFlow => &[
                "velocity_before",
                "velocity_after",
                "deficit_before",
                "deficit_after",
                "lane_changes",
                "phases_started",
                "phases_timed_out",
                "sorted",
            ],
            CaseStudy::Aggression => &["jerk_treatment", "jerk_control"],
        }
    }
}

impl fmt::Display for CaseStudy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CaseStudy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "traffic-flow" => Ok(CaseStudy::TrafficFlow),
            "aggression" => Ok(CaseStudy::Aggression),
            _ => Err(Error::invalid(format!(
                "unknown case study `{s}` (expected traffic-flow or aggression)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StudyConfigs {
    pub traffic: TrafficFlowConfig,
    pub aggression: AggressionConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "study", rename_all = "kebab-case")]
pub enum TrialMetrics {
    TrafficFlow {
        velocity_before: f64,
        velocity_after: f64,
        deficit_before: f64,
        deficit_after: f64,
        lane_changes: usize,
        phases_started: usize,
        phases_timed_out: usize,
        sorted: bool,
    },
    Aggression {
        jerk_treatment: f64,
        jerk_control: f64,
    },
}

impl TrialMetrics {
    fn cells(&self) -> Vec<String> {
        match *self {
            TrialMetrics::TrafficFlow {
                velocity_before,
                velocity_after,
                deficit_before,
                deficit_after,
                lane_changes,
                phases_started,
                phases_timed_out,
                sorted,
            } => vec![
                fmt_sig9(velocity_before),
                fmt_sig9(velocity_after),
                fmt_sig9(deficit_before),
                fmt_sig9(deficit_after),
                lane_changes.to_string(),
                phases_started.to_string(),
                phases_timed_out.to_string(),
                sorted.to_string(),
            ],
            TrialMetrics::Aggression {
                jerk_treatment,
                jerk_control,
            } => vec![fmt_sig9(jerk_treatment), fmt_sig9(jerk_control)],
        }
    }

    fn is_finite(&self) -> bool {
        match *self {
            TrialMetrics::TrafficFlow {
                velocity_before,
                velocity_after,
                deficit_before,
                deficit_after,
                ..
            } => [velocity_before, velocity_after, deficit_before, deficit_after]
                .iter()
                .all(|v| v.is_finite()),
            TrialMetrics::Aggression {
                jerk_treatment,
                jerk_control,
            } => jerk_treatment.is_finite() && jerk_control.is_finite(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub seed: u64,
    /// The trial ran to completion with finite metrics.
    pub success: bool,
    pub metrics: Option<TrialMetrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestReport {
    pub metric: String,
    /// Sample whose mean minus `mean_y` gives the sign of `t`.
    pub x: String,
    pub y: String,
    pub mean_x: f64,
    pub mean_y: f64,
    pub mean_diff: f64,
    pub t: f64,
    pub df: usize,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseStudySummary {
    pub study: CaseStudy,
    pub seed: u64,
    pub trials: usize,
    pub completed: usize,
    pub faulted: usize,
    pub tests: Vec<TestReport>,
}

impl CaseStudySummary {
    pub fn test(&self, metric: &str) -> Option<&TestReport> {
        self.tests.iter().find(|t| t.metric == metric)
    }

    pub fn within_fault_budget(&self) -> bool {
        self.faulted as f64 <= MAX_FAULT_FRACTION * self.trials as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseStudyReport {
    pub outcomes: Vec<TrialOutcome>,
    pub summary: CaseStudySummary,
}

impl CaseStudyReport {
    /// Fails when more than [`MAX_FAULT_FRACTION`] of the trials faulted.
    pub fn check(&self) -> Result<()> {
        if self.summary.within_fault_budget() {
            Ok(())
        } else {
            Err(Error::Fault(format!(
                "{} of {} {} trials faulted",
                self.summary.faulted, self.summary.trials, self.summary.study
            )))
        }
    }

    pub fn write_csv(&self, out: &mut dyn Write) -> Result<()> {
        let study = self.summary.study;
        writeln!(out, "trial,seed,success,{},error", study.columns().join(","))?;
        for o in &self.outcomes {
            let cells = match &o.metrics {
                Some(m) => m.cells(),
                None => vec![String::new(); study.columns().len()],
            };
            let error = o.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
            writeln!(out, "{},{},{},{},{}", o.trial, o.seed, o.success, cells.join(","), error)?;
        }
        Ok(())
    }
}

/// Seed of one trial, drawn from its own stream of the study seed.
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng.next_u64()
}

fn run_trial(study: CaseStudy, trial: usize, seed: u64, cfgs: &StudyConfigs) -> TrialOutcome {
    let metrics = match study {
        CaseStudy::TrafficFlow => traffic_flow_trial(seed, &cfgs.traffic).map(|t| TrialMetrics::TrafficFlow {
            velocity_before: t.before.mean_velocity,
            velocity_after: t.after.mean_velocity,
            deficit_before: t.before.mean_speed_deficit,
            deficit_after: t.after.mean_speed_deficit,
            lane_changes: t.lane_changes,
            phases_started: t.phases_started,
            phases_timed_out: t.phases_timed_out,
            sorted: t.sorted,
        }),
        CaseStudy::Aggression => aggression_trial(seed, &cfgs.aggression).map(|t| TrialMetrics::Aggression {
            jerk_treatment: t.treatment.jerk,
            jerk_control: t.control.jerk,
        }),
    };
    let (metrics, error) = match metrics {
        Ok(m) if m.is_finite() => (Some(m), None),
        Ok(m) => (Some(m), Some("non-finite metric".to_string())),
        Err(e) => (None, Some(e.to_string())),
    };
    TrialOutcome {
        trial,
        seed,
        success: error.is_none(),
        metrics,
        error,
    }
}

fn report(metric: &str, x_name: &str, y_name: &str, x: &[f64], y: &[f64]) -> Result<TestReport> {
    let TTest { t, p, df, mean_diff } = paired_t_test(x, y)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(TestReport {
        metric: metric.to_string(),
        x: x_name.to_string(),
        y: y_name.to_string(),
        mean_x: mean(x),
        mean_y: mean(y),
        mean_diff,
        t,
        df,
        p,
    })
}

fn tests(study: CaseStudy, outcomes: &[TrialOutcome]) -> Result<Vec<TestReport>> {
    let done: Vec<&TrialMetrics> = outcomes
        .iter()
        .filter(|o| o.success)
        .filter_map(|o| o.metrics.as_ref())
        .collect();
    if done.len() < 2 {
        return Ok(Vec::new());
    }
    let column = |k: usize| -> Vec<f64> {
        done.iter()
            .map(|m| match **m {
                TrialMetrics::TrafficFlow {
                    velocity_before,
                    velocity_after,
                    deficit_before,
                    deficit_after,
                    ..
                } => [velocity_before, velocity_after, deficit_before, deficit_after][k],
                TrialMetrics::Aggression {
                    jerk_treatment,
                    jerk_control,
                } => [jerk_treatment, jerk_control][k],
            })
            .collect()
    };
    Ok(match study {
        CaseStudy::TrafficFlow => vec![
            report("mean_velocity", "after", "before", &column(1), &column(0))?,
            report("mean_speed_deficit", "after", "before", &column(3), &column(2))?,
        ],
        CaseStudy::Aggression => vec![report("mean_abs_jerk", "control", "treatment", &column(1), &column(0))?],
    })
}

/// Runs every trial on at most `jobs` threads and returns outcomes in trial order.
pub fn run_trials(
    study: CaseStudy,
    trials: usize,
    seed: u64,
    jobs: usize,
    cfgs: &StudyConfigs,
) -> Result<CaseStudyReport> {
    if trials < 2 {
        return Err(Error::invalid("a case study needs at least two trials for the paired t-test"));
    }
    if jobs == 0 {
        return Err(Error::invalid("jobs must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let outcomes: Vec<TrialOutcome> = pool.install(|| {
        (0..trials)
            .into_par_iter()
            .map(|k| run_trial(study, k, trial_seed(seed, k), cfgs))
            .collect()
    });
    let faulted = outcomes.iter().filter(|o| !o.success).count();
    let summary = CaseStudySummary {
        study,
        seed,
        trials,
        completed: trials - faulted,
        faulted,
        tests: tests(study, &outcomes)?,
    };
    Ok(CaseStudyReport { outcomes, summary })
}

/// [`run_trials`] with default study settings, failing when too many trials fault.
pub fn run_case_study(study: CaseStudy, trials: usize, seed: u64, jobs: usize) -> Result<CaseStudyReport> {
    let report = run_trials(study, trials, seed, jobs, &StudyConfigs::default())?;
    report.check()?;
    Ok(report)
}
