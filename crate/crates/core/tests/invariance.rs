mod common;

use common::{bound_rollout, invariance, Invariance};
use influence_core::studies::scenario;
use influence_core::sim::run;
use proptest::prelude::*;

fn check(inv: Invariance) {
    assert!(inv.worst_after_entry >= -1e-3, "{inv:?}");
    assert!(inv.worst_active_decrease >= -1e-3, "{inv:?}");
}

#[test]
fn catalog_bound_scenarios_stay_in_their_safe_sets() {
    for (name, barrier) in [("s1", "v_max"), ("s2", "gap")] {
        let s = scenario(name).unwrap();
        let log = run(s.world, &s.specs, s.sim).unwrap();
        let inv = invariance(&log, barrier);
        let psi: Vec<f64> = log.psi_series(barrier).into_iter().map(|(_, p)| p).collect();
        let entries = psi.windows(2).filter(|w| w[0] < 0.0 && w[1] >= 0.0).count();
        assert!(psi[0] < 0.0 && entries == 1, "{name} crosses zero {entries} times");
        assert!(inv.eligible_steps > 5000, "{name}: {inv:?}");
        check(inv);
    }
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 48,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn velocity_bound_is_forward_invariant(
        gap in 15.0f64..60.0,
        v_robot in 18.0f64..32.0,
        excess in 0.5f64..5.0,
        v_max in 20.0f64..30.0,
    ) {
        let log = bound_rollout("s1", gap, v_robot, v_max + excess, v_max, 30.0);
        prop_assume!(log.is_some());
        let inv = invariance(&log.unwrap(), "psi");
        prop_assert!(inv.worst_after_entry >= -1e-3, "{:?}", inv);
    }

    #[test]
    fn gap_bound_is_forward_invariant(
        shortfall in 1.0f64..15.0,
        v_robot in 18.0f64..32.0,
        v_human in 18.0f64..32.0,
        s_min in 16.0f64..30.0,
    ) {
        let log = bound_rollout("s2", s_min - shortfall, v_robot, v_human, s_min, 30.0);
        prop_assume!(log.is_some());
        let inv = invariance(&log.unwrap(), "psi");
        prop_assert!(inv.worst_after_entry >= -1e-3, "{:?}", inv);
    }
}
