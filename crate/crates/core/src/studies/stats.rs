//! One-dimensional k-means, the paired t-test and the jerk metric.

use serde::Serialize;
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Cluster index of each input value; clusters are numbered by ascending centroid.
    pub assignments: Vec<usize>,
    pub centroids: Vec<f64>,
}

impl Clustering {
    /// Within-cluster sum of squared deviations.
    pub fn within_ss(&self, values: &[f64]) -> f64 {
        values
            .iter()
            .zip(&self.assignments)
            .map(|(x, &c)| (x - self.centroids[c]).powi(2))
            .sum()
    }
}

/// Globally optimal k-means on scalars.
///
/// Optimal 1-D clusters are runs of the sorted values, so the search walks
/// every way of cutting the sorted list into `k` non-empty runs and keeps the
/// one with the smallest within-cluster sum of squares (the first found on
/// ties). The result is a fixed point of Lloyd's iteration.
pub fn kmeans_1d(values: &[f64], k: usize) -> Result<Clustering> {
    if k == 0 || values.is_empty() {
        return Err(Error::invalid("k-means needs k >= 1 and at least one value"));
    }
    if k > values.len() {
        return Err(Error::invalid(format!("k = {k} exceeds {} values", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("k-means values must be finite"));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let sorted: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    let n = sorted.len();

    // run [i, j) costs its squared deviations about its own mean
    let run_cost = |i: usize, j: usize| {
        let run = &sorted[i..j];
        let mean = run.iter().sum::<f64>() / run.len() as f64;
        run.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
    };
    let mut cuts = vec![0usize; k + 1];
    cuts[k] = n;
    let mut best: Option<(f64, Vec<usize>)> = None;
    search_cuts(1, k, n, &mut cuts, &mut |c| {
        let cost: f64 = c.windows(2).map(|w| run_cost(w[0], w[1])).sum();
        if best.as_ref().is_none_or(|(b, _)| cost < *b) {
            best = Some((cost, c.to_vec()));
        }
    });
    let (_, cuts) = best.expect("at least one split exists");

    let mut assignments = vec![0; n];
    let mut centroids = Vec::with_capacity(k);
    for (c, w) in cuts.windows(2).enumerate() {
        let run = &sorted[w[0]..w[1]];
        centroids.push(run.iter().sum::<f64>() / run.len() as f64);
        for &i in &order[w[0]..w[1]] {
            assignments[i] = c;
        }
    }
    Ok(Clustering { assignments, centroids })
}

/// Calls `visit` with every strictly increasing `cuts[0] = 0 < … < cuts[k] = n`.
fn search_cuts(level: usize, k: usize, n: usize, cuts: &mut [usize], visit: &mut dyn FnMut(&[usize])) {
    if level == k {
        visit(cuts);
        return;
    }
    // leave at least one value for each remaining run
    for c in cuts[level - 1] + 1..=n - (k - level) {
        cuts[level] = c;
        search_cuts(level + 1, k, n, cuts, visit);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TTest {
    pub t: f64,
    /// Two-sided p-value.
    pub p: f64,
    pub df: usize,
    pub mean_diff: f64,
}

/// Two-sided Student-t tail probability `P(|T| ≥ |t|)`.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    beta_reg(df / 2.0, 0.5, df / (df + t * t))
}

/// Dependent t-test on the differences `x - y`.
pub fn paired_t_test(x: &[f64], y: &[f64]) -> Result<TTest> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!(
            "paired samples differ in length ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::invalid("paired t-test needs at least two pairs"));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let df = n - 1;
    let (t, p) = if sd == 0.0 {
        if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY.copysign(mean), 0.0)
        }
    } else {
        let t = mean / (sd / (n as f64).sqrt());
        (t, student_t_two_sided(t, df as f64))
    };
    Ok(TTest {
        t,
        p,
        df,
        mean_diff: mean,
    })
}

/// Mean of `|a[k+1] - a[k]| / dt` over a sampled acceleration series.
pub fn mean_abs_jerk(accel: &[f64], dt: f64) -> Result<f64> {
    if accel.len() < 2 || !(dt > 0.0) {
        return Err(Error::invalid("jerk needs two samples and positive dt"));
    }
    let total: f64 = accel.windows(2).map(|w| (w[1] - w[0]).abs() / dt).sum();
    Ok(total / (accel.len() - 1) as f64)
}
