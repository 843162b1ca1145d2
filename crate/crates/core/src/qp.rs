//! Minimum-norm control QP:
//!
//! ```text
//!     minimize    ||u||²
//!     subject to  A u ≥ b,  lo ≤ u ≤ hi
//! ```
//!
//! Solved with the Goldfarb–Idnani dual active-set method specialized to an
//! identity Hessian. The method starts from the unconstrained minimizer
//! `u = 0` and adds violated constraints one at a time, so it terminates
//! exactly and reports infeasibility without a phase-one problem. Infeasible
//! problems are re-solved with per-row slacks penalized by [`SLACK_WEIGHT`].

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Penalty ρ on squared slacks in the relaxed problem.
pub const SLACK_WEIGHT: f64 = 1e4;

/// Feasibility tolerance on unit-normalized rows.
const FEAS_TOL: f64 = 1e-11;

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
    /// Per-row multipliers on the slack penalty of the relaxed problem.
    pub weights: DVector<f64>,
}

impl QpProblem {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, lo: DVector<f64>, hi: DVector<f64>) -> Self {
        let weights = DVector::from_element(b.len(), 1.0);
        Self { a, b, lo, hi, weights }
    }

    pub fn with_weights(mut self, weights: DVector<f64>) -> Self {
        self.weights = weights;
        self
    }

    /// Box-only problem with `n` controls.
    pub fn unconstrained(lo: DVector<f64>, hi: DVector<f64>) -> Self {
        let n = lo.len();
        Self {
            a: DMatrix::zeros(0, n),
            b: DVector::zeros(0),
            lo,
            hi,
            weights: DVector::zeros(0),
        }
    }

    pub fn n(&self) -> usize {
        self.a.ncols()
    }

    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.b.len() != self.m() || self.weights.len() != self.m() || self.lo.len() != n || self.hi.len() != n {
            return Err(Error::invalid("QP dimensions disagree"));
        }
        if self.lo.iter().zip(self.hi.iter()).any(|(l, h)| !(l <= h)) {
            return Err(Error::invalid("QP box needs lo <= hi"));
        }
        if self.a.iter().chain(self.b.iter()).any(|x| !x.is_finite()) {
            return Err(Error::invalid("QP rows must be finite"));
        }
        if self.weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::invalid("slack weights must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    RelaxedFeasible,
    Failed,
}

impl QpStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            QpStatus::Optimal => "optimal",
            QpStatus::RelaxedFeasible => "relaxed",
            QpStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u: DVector<f64>,
    pub status: QpStatus,
    /// Per-row slack, zero unless relaxed.
    pub slack: DVector<f64>,
    pub kkt_residual: f64,
}

/// One inequality `normal · x ≥ rhs`.
#[derive(Debug, Clone)]
struct Halfspace {
    normal: DVector<f64>,
    rhs: f64,
}

impl Halfspace {
    fn new(normal: DVector<f64>, rhs: f64) -> Self {
        Self { normal, rhs }
    }

    fn slack(&self, x: &DVector<f64>) -> f64 {
        self.normal.dot(x) - self.rhs
    }
}

enum DualOutcome {
    Solved(DVector<f64>),
    Infeasible,
    Stalled,
}

/// Minimizes `½||x||²` over the given half-spaces with the dual method.
fn min_norm_point(dim: usize, rows: &[Halfspace]) -> DualOutcome {
    // unit-normalize rows; zero rows are either trivially true or infeasible
    let mut cons = Vec::with_capacity(rows.len());
    for r in rows {
        let norm = r.normal.norm();
        if norm == 0.0 {
            if r.rhs > FEAS_TOL {
                return DualOutcome::Infeasible;
            }
            continue;
        }
        cons.push(Halfspace::new(&r.normal / norm, r.rhs / norm));
    }

    let mut x = DVector::zeros(dim);
    let mut active: Vec<usize> = Vec::new();
    let mut mult: Vec<f64> = Vec::new();
    let max_iter = 50 * (cons.len() + dim + 1);
    let mut iter = 0;

    loop {
        let violated = cons
            .iter()
            .enumerate()
            .filter(|(i, _)| !active.contains(i))
            .map(|(i, c)| (i, c.slack(&x)))
            .filter(|&(_, s)| s < -FEAS_TOL)
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let Some((p, _)) = violated else {
            return DualOutcome::Solved(x);
        };
        let np = &cons[p].normal;
        let mut mult_p = 0.0;

        loop {
            iter += 1;
            if iter > max_iter {
                return DualOutcome::Stalled;
            }
            // r: multipliers of n_p on the active normals; z: null-space step
            let (z, r) = if active.is_empty() {
                (np.clone(), DVector::zeros(0))
            } else {
                let basis = DMatrix::from_columns(
                    &active.iter().map(|&i| cons[i].normal.clone()).collect::<Vec<_>>(),
                );
                let r = match basis.clone().svd(true, true).solve(np, 1e-13) {
                    Ok(r) => r,
                    Err(_) => return DualOutcome::Stalled,
                };
                (np - &basis * &r, r)
            };

            let mut t_dual = f64::INFINITY;
            let mut drop_at = None;
            for (k, &rk) in r.iter().enumerate() {
                if rk > 1e-12 {
                    let t = mult[k] / rk;
                    if t < t_dual {
                        t_dual = t;
                        drop_at = Some(k);
                    }
                }
            }
            let zz = z.dot(&z);
            let t_primal = if zz > 1e-20 {
                -cons[p].slack(&x) / zz
            } else {
                f64::INFINITY
            };

            if t_dual.is_infinite() && t_primal.is_infinite() {
                return DualOutcome::Infeasible;
            }
            let t = t_dual.min(t_primal);
            for (m, rk) in mult.iter_mut().zip(r.iter()) {
                *m -= t * rk;
            }
            mult_p += t;
            if t_primal.is_finite() {
                x += t * &z;
            }
            if t_primal <= t_dual {
                active.push(p);
                mult.push(mult_p);
                break;
            }
            let k = drop_at.expect("finite dual step has a blocking row");
            active.remove(k);
            mult.remove(k);
        }
    }
}

fn box_rows(lo: &DVector<f64>, hi: &DVector<f64>, dim: usize, offset: usize) -> Vec<Halfspace> {
    let mut rows = Vec::with_capacity(2 * lo.len());
    for i in 0..lo.len() {
        let mut e = DVector::zeros(dim);
        e[offset + i] = 1.0;
        rows.push(Halfspace::new(e.clone(), lo[i]));
        rows.push(Halfspace::new(-e, -hi[i]));
    }
    rows
}

/// Solves the control QP, falling back to the slack relaxation when the
/// constraints and box do not intersect.
pub fn solve_qp(problem: &QpProblem) -> Result<QpSolution> {
    problem.validate()?;
    let (n, m) = (problem.n(), problem.m());

    // pinned controls are substituted out
    let free: Vec<usize> = (0..n).filter(|&i| problem.lo[i] < problem.hi[i]).collect();
    let mut u = DVector::zeros(n);
    for i in (0..n).filter(|i| !free.contains(i)) {
        u[i] = problem.lo[i];
    }
    let nf = free.len();
    let reduced_rhs = &problem.b - &problem.a * &u;
    let reduced_a = problem.a.select_columns(&free);
    let lo_f = DVector::from_iterator(nf, free.iter().map(|&i| problem.lo[i]));
    let hi_f = DVector::from_iterator(nf, free.iter().map(|&i| problem.hi[i]));

    let mut rows: Vec<Halfspace> = (0..m)
        .map(|k| Halfspace::new(reduced_a.row(k).transpose(), reduced_rhs[k]))
        .collect();
    rows.extend(box_rows(&lo_f, &hi_f, nf, 0));

    if let DualOutcome::Solved(x) = min_norm_point(nf, &rows) {
        for (j, &i) in free.iter().enumerate() {
            u[i] = x[j].clamp(problem.lo[i], problem.hi[i]);
        }
        let kkt = kkt_residual(problem, &u);
        return Ok(QpSolution {
            u,
            status: QpStatus::Optimal,
            slack: DVector::zeros(m),
            kkt_residual: kkt,
        });
    }

    // relaxed: variables (u_free, w) with slack s_k = w_k / sqrt(rho_k)
    let scale: Vec<f64> = problem.weights.iter().map(|w| (SLACK_WEIGHT * w).sqrt()).collect();
    let dim = nf + m;
    let mut rows = Vec::with_capacity(m + dim * 2);
    for k in 0..m {
        let mut g = DVector::zeros(dim);
        g.rows_mut(0, nf).copy_from(&reduced_a.row(k).transpose());
        g[nf + k] = 1.0 / scale[k];
        rows.push(Halfspace::new(g, reduced_rhs[k]));
    }
    rows.extend(box_rows(&lo_f, &hi_f, dim, 0));
    for k in 0..m {
        let mut e = DVector::zeros(dim);
        e[nf + k] = 1.0;
        rows.push(Halfspace::new(e, 0.0));
    }
    match min_norm_point(dim, &rows) {
        DualOutcome::Solved(x) => {
            for (j, &i) in free.iter().enumerate() {
                u[i] = x[j].clamp(problem.lo[i], problem.hi[i]);
            }
            let slack = DVector::from_iterator(m, (0..m).map(|k| x[nf + k] / scale[k]));
            let relaxed = QpProblem {
                b: &problem.b - &slack,
                ..problem.clone()
            };
            let kkt = kkt_residual(&relaxed, &u);
            Ok(QpSolution {
                u,
                status: QpStatus::RelaxedFeasible,
                slack,
                kkt_residual: kkt,
            })
        }
        DualOutcome::Infeasible | DualOutcome::Stalled => Ok(QpSolution {
            u: DVector::zeros(n),
            status: QpStatus::Failed,
            slack: DVector::zeros(m),
            kkt_residual: f64::INFINITY,
        }),
    }
}

/// Lawson–Hanson non-negative least squares: `min ||G μ - y||, μ ≥ 0`.
fn nnls(g: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let k = g.ncols();
    let mut mu = DVector::zeros(k);
    let mut passive = vec![false; k];
    for _ in 0..(3 * k + 3) {
        let w = g.transpose() * (y - g * &mu);
        let candidate = (0..k)
            .filter(|&j| !passive[j] && w[j] > 1e-12)
            .max_by(|&a, &b| w[a].total_cmp(&w[b]));
        let Some(j) = candidate else { break };
        passive[j] = true;
        loop {
            let cols: Vec<usize> = (0..k).filter(|&j| passive[j]).collect();
            let sub = g.select_columns(&cols);
            let Ok(z) = sub.svd(true, true).solve(y, 1e-13) else {
                return mu;
            };
            if z.iter().all(|&x| x > 0.0) {
                for (c, &j) in cols.iter().enumerate() {
                    mu[j] = z[c];
                }
                break;
            }
            // step back toward the feasible region and release the blocking columns
            let mut alpha = f64::INFINITY;
            for (c, &j) in cols.iter().enumerate() {
                if z[c] <= 0.0 {
                    alpha = alpha.min(mu[j] / (mu[j] - z[c]));
                }
            }
            for (c, &j) in cols.iter().enumerate() {
                mu[j] += alpha * (z[c] - mu[j]);
                if mu[j] <= 1e-15 {
                    mu[j] = 0.0;
                    passive[j] = false;
                }
            }
        }
    }
    mu
}

/// Largest of the stationarity, primal feasibility, dual feasibility and
/// complementarity residuals of `u`, with multipliers fitted by
/// non-negative least squares on the rows active at `u`.
pub fn kkt_residual(problem: &QpProblem, u: &DVector<f64>) -> f64 {
    let n = problem.n();
    let mut rows = Vec::with_capacity(problem.m() + 2 * n);
    for k in 0..problem.m() {
        rows.push(Halfspace::new(problem.a.row(k).transpose(), problem.b[k]));
    }
    rows.extend(box_rows(&problem.lo, &problem.hi, n, 0));

    let mut primal = 0.0f64;
    let mut active = Vec::new();
    for r in &rows {
        let s = r.slack(u);
        primal = primal.max(-s);
        if s.abs() <= 1e-7 * (1.0 + r.rhs.abs()) {
            active.push(r);
        }
    }

    let grad = 2.0 * u;
    let (stationarity, dual, complementarity) = if active.is_empty() {
        (grad.norm(), 0.0, 0.0)
    } else {
        let g = DMatrix::from_columns(&active.iter().map(|r| r.normal.clone()).collect::<Vec<_>>());
        let mu = nnls(&g, &grad);
        let stat = (&grad - &g * &mu).norm();
        let dual = mu.iter().fold(0.0f64, |acc, &m| acc.max(-m));
        let comp = active
            .iter()
            .zip(mu.iter())
            .fold(0.0f64, |acc, (r, m)| acc.max((m * r.slack(u)).abs()));
        (stat, dual, comp)
    };
    primal.max(stationarity).max(dual).max(complementarity)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn wide(n: usize) -> (DVector<f64>, DVector<f64>) {
        (DVector::from_element(n, -1e6), DVector::from_element(n, 1e6))
    }

    #[test]
    fn unconstrained_minimum_is_zero() {
        let p = QpProblem::unconstrained(DVector::from_vec(vec![-4.0]), DVector::from_vec(vec![2.0]));
        let s = solve_qp(&p).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_eq!(s.u[0], 0.0);
        assert!(s.kkt_residual < 1e-12);
    }

    #[test]
    fn halfspace_projection() {
        let (lo, hi) = wide(2);
        let p = QpProblem::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DVector::from_vec(vec![1.0]),
            lo,
            hi,
        );
        let s = solve_qp(&p).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_relative_eq!(s.u[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(s.u[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn projection_onto_oblique_halfspace() {
        let (lo, hi) = wide(3);
        let a = [2.0, -1.0, 0.5];
        let b = 3.0;
        let p = QpProblem::new(DMatrix::from_row_slice(1, 3, &a), DVector::from_vec(vec![b]), lo, hi);
        let s = solve_qp(&p).unwrap();
        let nn: f64 = a.iter().map(|x| x * x).sum();
        for i in 0..3 {
            assert_relative_eq!(s.u[i], b * a[i] / nn, epsilon = 1e-12);
        }
    }

    #[test]
    fn box_clips_solution() {
        let p = QpProblem::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_vec(vec![3.0]),
            DVector::from_vec(vec![-4.0, -4.0]),
            DVector::from_vec(vec![1.0, 2.0]),
        );
        let s = solve_qp(&p).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_relative_eq!(s.u[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(s.u[1], 2.0, epsilon = 1e-12);
        assert!(s.kkt_residual < 1e-9);
    }

    #[test]
    fn infeasible_falls_back_to_slack() {
        // u ≥ 5 with u ≤ 2
        let p = QpProblem::new(
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DVector::from_vec(vec![5.0]),
            DVector::from_vec(vec![-4.0]),
            DVector::from_vec(vec![2.0]),
        );
        let s = solve_qp(&p).unwrap();
        assert_eq!(s.status, QpStatus::RelaxedFeasible);
        assert_relative_eq!(s.u[0], 2.0, epsilon = 1e-9);
        assert_relative_eq!(s.slack[0], 3.0, epsilon = 1e-9);
    }

    #[test]
    fn conflicting_rows_relax() {
        let (lo, hi) = wide(1);
        let p = QpProblem::new(
            DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            DVector::from_vec(vec![1.0, 1.0]),
            lo,
            hi,
        );
        let s = solve_qp(&p).unwrap();
        assert_eq!(s.status, QpStatus::RelaxedFeasible);
        // symmetric split of the violation
        assert!(s.u[0].abs() < 1e-6);
        assert_relative_eq!(s.slack[0], 1.0, epsilon = 1e-3);
        assert_relative_eq!(s.slack[1], 1.0, epsilon = 1e-3);
    }

    #[test]
    fn pinned_controls_are_respected() {
        let p = QpProblem::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_vec(vec![1.0]),
            DVector::from_vec(vec![-0.5, -4.0]),
            DVector::from_vec(vec![-0.5, 2.0]),
        );
        let s = solve_qp(&p).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_eq!(s.u[0], -0.5);
        assert_relative_eq!(s.u[1], 1.5, epsilon = 1e-12);
    }

    #[test]
    fn zero_row_with_positive_rhs_is_infeasible() {
        let (lo, hi) = wide(1);
        let p = QpProblem::new(DMatrix::zeros(1, 1), DVector::from_vec(vec![1.0]), lo, hi);
        let s = solve_qp(&p).unwrap();
        assert_eq!(s.status, QpStatus::RelaxedFeasible);
    }

    #[test]
    fn interior_point_stationarity() {
        let (lo, hi) = wide(2);
        let p = QpProblem::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DVector::from_vec(vec![-10.0]),
            lo,
            hi,
        );
        let u = DVector::from_vec(vec![0.3, -0.4]);
        assert_relative_eq!(kkt_residual(&p, &u), 2.0 * u.norm(), epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_box() {
        let p = QpProblem::unconstrained(DVector::from_vec(vec![1.0]), DVector::from_vec(vec![0.0]));
        assert!(solve_qp(&p).is_err());
    }
}
