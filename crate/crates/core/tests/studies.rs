use influence_core::studies::aggression::{aggression_arm, AggressionConfig, HUMAN, ROBOT};
use influence_core::studies::harness::trial_seed;
use influence_core::studies::{run_trials, CaseStudy, StudyConfigs};
use rayon::prelude::*;

#[test]
fn treated_human_keeps_normal_gap_and_speed_after_the_transient() {
    let cfg = AggressionConfig::default();
    let counts: Vec<(usize, usize)> = (0..100)
        .into_par_iter()
        .filter_map(|k| aggression_arm(trial_seed(0, k), true, &cfg).ok())
        .map(|arm| {
            let late: Vec<_> = arm.log.steps.iter().filter(|s| s.t >= 30.0).collect();
            let held = late
                .iter()
                .filter(|s| {
                    let (r, h) = (s.car(ROBOT).unwrap(), s.car(HUMAN).unwrap());
                    r.p - h.p - 5.0 >= cfg.gap_min - 0.5 && h.v <= cfg.v_max + 0.5
                })
                .count();
            (held, late.len())
        })
        .collect();
    assert!(counts.len() >= 90);
    let (held, total) = counts.iter().fold((0, 0), |(a, b), (h, t)| (a + h, b + t));
    let fraction = held as f64 / total as f64;
    assert!(fraction >= 0.95, "held in {fraction} of steps");
}

#[test]
fn disabled_influence_gives_identical_arms() {
    let cfgs = StudyConfigs {
        aggression: AggressionConfig {
            influence: false,
            duration: 10.0,
            ..AggressionConfig::default()
        },
        ..StudyConfigs::default()
    };
    let report = run_trials(CaseStudy::Aggression, 8, 3, 2, &cfgs).unwrap();
    let test = report.summary.test("mean_abs_jerk").unwrap();
    assert_eq!(test.t, 0.0);
    assert_eq!(test.p, 1.0);
}

#[test]
fn trial_rows_follow_the_requested_count_and_are_reproducible() {
    let cfgs = StudyConfigs {
        aggression: AggressionConfig {
            duration: 5.0,
            ..AggressionConfig::default()
        },
        ..StudyConfigs::default()
    };
    let a = run_trials(CaseStudy::Aggression, 12, 9, 3, &cfgs).unwrap();
    let b = run_trials(CaseStudy::Aggression, 12, 9, 1, &cfgs).unwrap();
    assert_eq!(a.outcomes.len(), 12);
    let csv = |r: &influence_core::studies::CaseStudyReport| {
        let mut out = Vec::new();
        r.write_csv(&mut out).unwrap();
        out
    };
    assert_eq!(csv(&a), csv(&b));
}

#[test]
fn fewer_than_two_trials_is_rejected() {
    assert!(run_trials(CaseStudy::TrafficFlow, 1, 0, 1, &StudyConfigs::default()).is_err());
}
