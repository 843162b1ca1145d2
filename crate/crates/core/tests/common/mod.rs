//! Independent reference computations shared by the integration tests.

#![allow(dead_code)]

use influence_core::behavior::{idm_partials, IdmParams, Leader};
use influence_core::cbf::{BarrierForm, BarrierSpec};
use influence_core::sim::{run, SimConfig, Simulator, StepRecord, TrajectoryLog};
use influence_core::studies::scenario;
use influence_core::studies::stats::{kmeans_1d, paired_t_test};
use influence_core::qp::{kkt_residual, solve_qp, QpProblem, QpStatus};
use influence_core::world::{CarId, CarKind, ControlLimits, HumanDriver, VehicleState, WorldState};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// IDM acceleration written out term by term from its textbook form.
pub fn idm_reference(v: f64, v_lead: f64, gap: f64, p: &IdmParams) -> f64 {
    let desired = p.s0 + v * p.headway + v * (v - v_lead) / (2.0 * (p.a_max * p.b_max).sqrt());
    p.a_max * (1.0 - (v / p.v0).powi(4) - (desired / gap).powi(2))
}

/// Hand-derived partials of the IDM acceleration with respect to the
/// follower velocity, the leader velocity and the bumper gap.
pub struct HandPartials {
    pub d_v: f64,
    pub d_vl: f64,
    pub d_gap: f64,
}

pub fn hand_partials(v: f64, v_lead: f64, gap: f64, p: &IdmParams) -> HandPartials {
    let root = (p.a_max * p.b_max).sqrt();
    let desired = p.s0 + v * p.headway + v * (v - v_lead) / (2.0 * root);
    let ratio = desired / gap;
    HandPartials {
        d_v: -p.a_max * (4.0 * v.powi(3) / p.v0.powi(4) + 2.0 * ratio * (p.headway + (2.0 * v - v_lead) / (2.0 * root)) / gap),
        d_vl: p.a_max * ratio * v / (root * gap),
        d_gap: 2.0 * p.a_max * ratio * ratio / gap,
    }
}

pub struct FdCase {
    pub params: IdmParams,
    /// Follower position and velocity, then leader position and velocity.
    pub state: [f64; 4],
    /// Central differences of the IDM acceleration along each state entry.
    pub fd: [f64; 4],
}

/// States and 50-digit central differences from `fixtures/gen_idm_fd_reference.py`.
pub fn idm_fd_cases() -> Vec<FdCase> {
    let text = include_str!("../fixtures/idm_fd_reference.json");
    let raw: Vec<serde_json::Value> = serde_json::from_str(text).expect("fixture parses");
    raw.iter()
        .map(|c| {
            let params = match c["params"].as_str() {
                Some("normal") => IdmParams::NORMAL,
                _ => IdmParams::AGGRESSIVE,
            };
            let state: Vec<f64> = c["state"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
            let fd: Vec<f64> = c["fd"]
                .as_array()
                .unwrap()
                .iter()
                .map(|v| v.as_str().unwrap().parse().unwrap())
                .collect();
            FdCase {
                params,
                state: state.try_into().unwrap(),
                fd: fd.try_into().unwrap(),
            }
        })
        .collect()
}

pub struct TTestCase {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub t: f64,
    pub p: f64,
    pub df: usize,
}

/// Paired samples with 60-digit t and p from `fixtures/gen_ttest_reference.py`.
pub fn ttest_cases() -> Vec<TTestCase> {
    let text = include_str!("../fixtures/ttest_reference.json");
    let raw: Vec<serde_json::Value> = serde_json::from_str(text).expect("fixture parses");
    let floats = |v: &serde_json::Value| v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    raw.iter()
        .map(|c| TTestCase {
            x: floats(&c["x"]),
            y: floats(&c["y"]),
            t: c["t"].as_str().unwrap().parse().unwrap(),
            p: c["p"].as_str().unwrap().parse().unwrap(),
            df: c["df"].as_u64().unwrap() as usize,
        })
        .collect()
}

/// Exhaustive active-set oracle for `min ||u||² s.t. A u ≥ b, lo ≤ u ≤ hi`.
///
/// Every subset of the constraints is tried as an equality set; the
/// minimum-norm point of each consistent set that satisfies all constraints
/// is a candidate, and the smallest candidate is the optimum.
pub fn qp_oracle(a: &DMatrix<f64>, b: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> Option<DVector<f64>> {
    let n = a.ncols();
    let mut normals: Vec<DVector<f64>> = (0..a.nrows()).map(|k| a.row(k).transpose()).collect();
    let mut rhs: Vec<f64> = b.iter().copied().collect();
    for i in 0..n {
        let mut e = DVector::zeros(n);
        e[i] = 1.0;
        normals.push(e.clone());
        rhs.push(lo[i]);
        normals.push(-e);
        rhs.push(-hi[i]);
    }
    let total = normals.len();
    let feasible = |u: &DVector<f64>| {
        normals
            .iter()
            .zip(&rhs)
            .all(|(g, &r)| g.dot(u) - r >= -1e-9 * (1.0 + r.abs()))
    };
    let mut best: Option<DVector<f64>> = None;
    for mask in 0u32..(1 << total) {
        let set: Vec<usize> = (0..total).filter(|k| mask & (1 << k) != 0).collect();
        if set.len() > n {
            continue;
        }
        let u = if set.is_empty() {
            DVector::zeros(n)
        } else {
            let g = DMatrix::from_columns(&set.iter().map(|&k| normals[k].clone()).collect::<Vec<_>>());
            let h = DVector::from_iterator(set.len(), set.iter().map(|&k| rhs[k]));
            // minimum-norm solution of gᵀ u = h
            let gram = g.transpose() * &g;
            let Some(inv) = gram.try_inverse() else { continue };
            &g * (inv * h)
        };
        if feasible(&u) && best.as_ref().is_none_or(|b| u.norm_squared() < b.norm_squared()) {
            best = Some(u);
        }
    }
    best
}

/// Optimal 1-D k-means objective by dynamic programming over sorted splits.
pub fn kmeans_dp(values: &[f64], k: usize) -> f64 {
    let mut x = values.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len();
    let cost = |i: usize, j: usize| {
        let seg = &x[i..j];
        let mean = seg.iter().sum::<f64>() / seg.len() as f64;
        seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
    };
    let mut dp = vec![vec![f64::INFINITY; n + 1]; k + 1];
    dp[0][0] = 0.0;
    for c in 1..=k {
        for j in 1..=n {
            for i in (c - 1)..j {
                let prev = dp[c - 1][i];
                if prev.is_finite() {
                    dp[c][j] = dp[c][j].min(prev + cost(i, j));
                }
            }
        }
    }
    dp[k][n]
}

pub fn human(id: u32, lane: u32, p: f64, v: f64, idm: IdmParams) -> VehicleState {
    VehicleState::new(
        id,
        CarKind::Human(HumanDriver {
            idm,
            lane_change: Default::default(),
        }),
        lane,
        p,
        v,
    )
}

pub fn robot(id: u32, lane: u32, p: f64, v: f64) -> VehicleState {
    VehicleState::new(id, CarKind::robot(ControlLimits::default()), lane, p, v)
}

/// Robot 1 leading human 2 in one lane under a single barrier.
pub fn pair_rollout(gap: f64, v_robot: f64, v_human: f64, spec: BarrierForm, duration: f64) -> TrajectoryLog {
    let world = WorldState::new(
        1,
        vec![robot(1, 1, gap + 5.0, v_robot), human(2, 1, 0.0, v_human, IdmParams::NORMAL)],
    );
    run(world, &[BarrierSpec::new("psi", spec)], SimConfig::new(duration)).expect("rollout")
}

/// Human `id` of the merge scenario as seen by the hand formulas.
struct HandHuman {
    f: f64,
    v: f64,
    partials: HandPartials,
    lambda: f64,
}

fn hand_human(world: &WorldState, id: u32, leader: u32) -> HandHuman {
    let car = world.car(CarId(id)).unwrap();
    let lead = world.car(CarId(leader)).unwrap();
    let params = car.human().unwrap().idm;
    let gap = lead.p - car.p - world.car_length;
    let f = idm_reference(car.v, lead.v, gap, &params);
    let a_cmd = f.clamp(-3.0 * params.b_max, params.a_max);
    let partials = hand_partials(car.v, lead.v, gap, &params);
    let lambda = -partials.d_gap * car.v + partials.d_v * a_cmd + partials.d_gap * lead.v;
    HandHuman {
        f,
        v: car.v,
        partials,
        lambda,
    }
}

/// Mean absolute deviation between the one-step difference quotient of
/// human 4's IDM acceleration and `λ + ∂f/∂v_leader · u` along a merge
/// rollout, with the number of steps compared. Steps where the human's
/// leader is not robot 3 at both ends are skipped.
pub fn ladder_wiring_error(duration: f64) -> (f64, usize) {
    let m1 = scenario("m1").unwrap();
    let mut sim = Simulator::new(m1.world, m1.sim).unwrap();
    let steps = (duration / m1.sim.dt).round() as usize;
    let dt = m1.sim.dt;
    let (mut total, mut count) = (0.0, 0);
    for _ in 0..steps {
        let before = sim.world().clone();
        let rec = sim.step(&m1.specs).unwrap();
        let after = sim.world();
        let lead_of = |w: &WorldState| w.leader_of(CarId(4), w.car(CarId(4)).unwrap().lane).unwrap();
        if lead_of(&before) != Some(CarId(3)) || lead_of(after) != Some(CarId(3)) {
            continue;
        }
        let h0 = hand_human(&before, 4, 3);
        let h1 = hand_human(after, 4, 3);
        let u = rec.car(CarId(3)).unwrap().u.unwrap();
        let predicted = h0.lambda + h0.partials.d_vl * u;
        total += ((h1.f - h0.f) / dt - predicted).abs();
        count += 1;
    }
    (total / count as f64, count)
}

/// The merge system after `step` steps written out by hand: `A` by rows, then `b`.
pub fn m1_hand_system(step: usize) -> ([[f64; 2]; 2], [f64; 2]) {
    let m1 = scenario("m1").unwrap();
    let dt = m1.sim.dt;
    let mut sim = Simulator::new(m1.world, m1.sim).unwrap();
    for _ in 0..step {
        sim.step(&m1.specs).unwrap();
    }
    let w = sim.world();
    let car = |id: u32| w.car(CarId(id)).unwrap();
    // poles all at 1: (s + 1)³ = s³ + 3s² + 3s + 1
    let (c0, c1, c2) = (1.0, 3.0, 3.0);
    let h2 = hand_human(w, 2, 1);
    let h4 = hand_human(w, 4, 3);
    let psi_f = car(1).p - car(4).p - 10.0;
    let psi_b = car(4).p - car(2).p - 10.0;
    let a = [
        [c2 + 1.0 / dt, -h4.partials.d_vl],
        [-h2.partials.d_vl, h4.partials.d_vl],
    ];
    let b = [
        car(1).a / dt + h4.lambda + c2 * h4.f - c1 * (car(1).v - h4.v) - c0 * psi_f,
        h2.lambda - h4.lambda - c2 * (h4.f - h2.f) - c1 * (h4.v - h2.v) - c0 * psi_b,
    ];
    (a, b)
}

/// Worst relative deviation between the merge constraint system assembled
/// after `step` steps and the same system written out by hand.
pub fn m1_symbolic_error(step: usize) -> f64 {
    let m1 = scenario("m1").unwrap();
    let mut sim = Simulator::new(m1.world, m1.sim).unwrap();
    for _ in 0..step {
        sim.step(&m1.specs).unwrap();
    }
    let d = sim.derive(&m1.specs).unwrap();
    let (a, b) = m1_hand_system(step);
    assert_eq!(d.system.robots, [CarId(1), CarId(3)]);
    assert_eq!((d.system.a.nrows(), d.system.a.ncols()), (2, 2));
    let rel = |got: f64, want: f64| (got - want).abs() / want.abs().max(1e-300);
    let mut worst = 0.0f64;
    for i in 0..2 {
        for j in 0..2 {
            worst = worst.max(rel(d.system.a[(i, j)], a[i][j]));
        }
        worst = worst.max(rel(d.system.b[i], b[i]));
    }
    worst
}

/// Forward-invariance measurements of one barrier along a rollout, taken
/// over steps whose QP was solved without relaxation while every robot stayed
/// strictly inside its velocity limits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Invariance {
    /// Lowest ψ after ψ ≥ 0 at an eligible step, until the next ineligible step.
    pub worst_after_entry: f64,
    /// Most negative one-step change of ψ from eligible steps with ψ < 0 and the row active.
    pub worst_active_decrease: f64,
    pub eligible_steps: usize,
}

pub fn invariance(log: &TrajectoryLog, name: &str) -> Invariance {
    let limits = ControlLimits::default();
    let eligible = |s: &StepRecord| {
        s.qp_status == QpStatus::Optimal
            && s.cars
                .iter()
                .filter(|c| c.kind == "robot")
                .all(|c| c.v > limits.v_lo && c.v < limits.v_hi)
    };
    let mut worst_after_entry = f64::INFINITY;
    let mut entered = false;
    let mut worst_active_decrease = 0.0f64;
    let mut eligible_steps = 0;
    for pair in log.steps.windows(2) {
        if !eligible(&pair[0]) {
            entered = false;
            continue;
        }
        eligible_steps += 1;
        let (b0, b1) = (pair[0].barrier(name).unwrap(), pair[1].barrier(name).unwrap());
        entered |= b0.psi >= 0.0;
        if entered {
            worst_after_entry = worst_after_entry.min(b1.psi);
        }
        let active = b0.margin.is_some_and(|m| m.abs() <= 1e-6);
        if b0.psi < 0.0 && active {
            worst_active_decrease = worst_active_decrease.min(b1.psi - b0.psi);
        }
    }
    Invariance {
        worst_after_entry,
        worst_active_decrease,
        eligible_steps,
    }
}

/// Robot 1 leads human 2; `s1` bounds the human's velocity, `s2` its gap.
/// `None` if the rollout faults.
pub fn bound_rollout(form: &str, gap: f64, v_robot: f64, v_human: f64, bound: f64, duration: f64) -> Option<TrajectoryLog> {
    let spec = match form {
        "s1" => BarrierForm::VelocityUpper { car: CarId(2), v_max: bound },
        _ => BarrierForm::GapLower { front: CarId(1), back: CarId(2), margin: bound + 5.0 },
    };
    let world = WorldState::new(
        1,
        vec![robot(1, 1, gap + 5.0, v_robot), human(2, 1, 0.0, v_human, IdmParams::NORMAL)],
    );
    run(world, &[BarrierSpec::new("psi", spec)], SimConfig::new(duration)).ok()
}

/// Random instance with a known feasible point inside the box.
pub fn feasible_instance(rng: &mut impl Rng) -> QpProblem {
    let n = rng.random_range(1..=3);
    let m = rng.random_range(0..=4);
    let lo = DVector::from_fn(n, |_, _| rng.random_range(-5.0..0.0));
    let hi = DVector::from_fn(n, |_, _| rng.random_range(0.0..5.0));
    let x = DVector::from_fn(n, |i, _| rng.random_range(lo[i]..=hi[i]));
    let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-3.0..3.0));
    let b = DVector::from_fn(m, |k, _| {
        let slack = if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..4.0) };
        (a.row(k) * &x)[0] - slack
    });
    QpProblem::new(a, b, lo, hi)
}

pub struct QpComparison {
    pub worst_objective_gap: f64,
    pub worst_kkt: f64,
    pub all_optimal: bool,
}

/// Solver against the enumeration oracle on `count` seeded feasible instances.
pub fn qp_oracle_comparison(seed: u64, count: usize) -> QpComparison {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = QpComparison {
        worst_objective_gap: 0.0,
        worst_kkt: 0.0,
        all_optimal: true,
    };
    for _ in 0..count {
        let p = feasible_instance(&mut rng);
        let s = solve_qp(&p).unwrap();
        r.all_optimal &= s.status == QpStatus::Optimal;
        let best = qp_oracle(&p.a, &p.b, &p.lo, &p.hi).expect("instance is feasible by construction");
        r.worst_objective_gap = r.worst_objective_gap.max((s.u.norm_squared() - best.norm_squared()).abs());
        r.worst_kkt = r.worst_kkt.max(kkt_residual(&p, &s.u));
    }
    r
}

/// Worst relative error of the analytic IDM partials against the
/// high-precision central differences of the fixture.
pub fn idm_fd_worst() -> (f64, usize) {
    let cases = idm_fd_cases();
    let mut worst = 0.0f64;
    for c in &cases {
        let [p_f, v_f, p_l, v_l] = c.state;
        let follower = VehicleState::new(2, CarKind::Background, 1, p_f, v_f);
        let d = idm_partials(&follower, Leader { p: p_l, v: v_l }, &c.params, 5.0).unwrap();
        let an = [d.df_dp_follower, d.df_dv_follower, d.df_dp_leader, d.df_dv_leader];
        for (a, n) in an.iter().zip(&c.fd) {
            worst = worst.max((a - n).abs() / n.abs());
        }
    }
    (worst, cases.len())
}

/// Worst absolute t and p deviations from the arbitrary-precision fixture.
pub fn ttest_worst() -> (f64, f64, usize) {
    let cases = ttest_cases();
    let (mut wt, mut wp) = (0.0f64, 0.0f64);
    for c in &cases {
        let r = paired_t_test(&c.x, &c.y).unwrap();
        assert_eq!(r.df, c.df);
        wt = wt.max((r.t - c.t).abs() / c.t.abs().max(1.0));
        wp = wp.max((r.p - c.p).abs());
    }
    (wt, wp, cases.len())
}

/// Instances among `count` seeded ones (n in 3..=12, k = 3) where the
/// clustering misses the DP optimum, with the worst objective gap.
pub fn kmeans_misses(seed: u64, count: usize) -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut misses, mut worst) = (0, 0.0f64);
    for _ in 0..count {
        let n = rng.random_range(3..=12);
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(25.0..40.0)).collect();
        let got = kmeans_1d(&values, 3).unwrap().within_ss(&values);
        let best = kmeans_dp(&values, 3);
        let gap = (got - best) / (1.0 + best);
        worst = worst.max(gap.abs());
        if gap.abs() > 1e-9 {
            misses += 1;
        }
    }
    (misses, worst)
}

/// Seeded S1-style (human above its speed bound) or S2-style (human inside
/// its minimum gap) rollouts, each starting outside the safe set.
pub fn invariance_family(form: &str, seed: u64, count: usize) -> Vec<Invariance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..count {
        let log = if form == "s1" {
            let (gap, v_robot, excess, v_max) = (
                rng.random_range(15.0..60.0),
                rng.random_range(18.0..32.0),
                rng.random_range(0.5..5.0),
                rng.random_range(20.0..30.0),
            );
            bound_rollout("s1", gap, v_robot, v_max + excess, v_max, 30.0)
        } else {
            let (shortfall, v_robot, v_human, s_min) = (
                rng.random_range(1.0..15.0),
                rng.random_range(18.0..32.0),
                rng.random_range(18.0..32.0),
                rng.random_range(16.0..30.0),
            );
            bound_rollout("s2", s_min - shortfall, v_robot, v_human, s_min, 30.0)
        };
        if let Some(log) = log {
            out.push(invariance(&log, "psi"));
        }
    }
    out
}
