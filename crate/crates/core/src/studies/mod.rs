//! Scenario catalog, the two case studies and their statistics.

pub mod aggression;
pub mod harness;
pub mod scenarios;
pub mod stats;
pub mod traffic;

pub use harness::{run_case_study, run_trials, CaseStudy, CaseStudyReport, CaseStudySummary, StudyConfigs, TrialOutcome};
pub use scenarios::{scenario, scenario_catalog};
