//! Uncertainty-weighted K-Means.
//!
//! Lloyd alternation: each point is assigned to its nearest centroid by
//! squared Euclidean distance, then every centroid moves to the
//! weight-normalized mean of its set. Seeding is weighted KMeans++.
//!
//! Two objectives are tracked for a partition `{X_k}` with weights `h`:
//!
//! * the set-partitioning objective `Σ_k (1/Z_k) Σ_{x∈X_k} h(x)·||x − μ_k||²`
//!   with `Z_k = Σ_{x∈X_k} h(x)` (a sum of per-set weighted variances), and
//! * the surrogate `Σ_k Σ_{x∈X_k} h(x)·||x − μ_k||²` that the Assign/Update
//!   steps minimize exactly.
//!
//! The surrogate is what Lloyd iterations decrease monotonically and what
//! restarts compete on; the normalized value is reported alongside it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{sq_dist, Matrix};
use crate::uncertainty::UncertaintyWeights;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Stop once no centroid moves farther than this (Euclidean).
    pub tol: f64,
    pub seed: u64,
    pub restarts: usize,
}

impl ClusterConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_iters: 300,
            tol: 1e-6,
            seed,
            restarts: 1,
        }
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::InvalidArgument("tol must be non-negative".into()));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidArgument("restarts must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    pub centroids: Matrix,
    pub assignment: Vec<usize>,
    /// Sum of per-set weighted variances (normalized objective).
    pub objective: f64,
    /// Weighted within-set sum of squares (what Lloyd minimizes).
    pub surrogate_objective: f64,
    pub iterations_run: usize,
    /// Surrogate objective after every Lloyd iteration of the winning restart.
    pub trace: Vec<f64>,
}

impl ClusterState {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }
}

/// Normalized and surrogate objectives of a labelled partition, using the
/// weighted mean of each set as its centre. Sets that are empty or carry no
/// weight contribute zero.
pub fn partition_objectives(
    points: &Matrix,
    weights: &[f64],
    assignment: &[usize],
    k: usize,
) -> (f64, f64) {
    let d = points.cols();
    let mut sums = vec![0.0; k * d];
    let mut z = vec![0.0; k];
    for (i, &a) in assignment.iter().enumerate() {
        z[a] += weights[i];
        for (s, x) in sums[a * d..(a + 1) * d].iter_mut().zip(points.row(i)) {
            *s += weights[i] * x;
        }
    }
    let mut per_set = vec![0.0; k];
    for (i, &a) in assignment.iter().enumerate() {
        if z[a] > 0.0 {
            let dist: f64 = points
                .row(i)
                .iter()
                .zip(&sums[a * d..(a + 1) * d])
                .map(|(x, s)| {
                    let diff = x - s / z[a];
                    diff * diff
                })
                .sum();
            per_set[a] += weights[i] * dist;
        }
    }
    let surrogate = per_set.iter().sum();
    let normalized = per_set
        .iter()
        .zip(&z)
        .filter(|(_, &zk)| zk > 0.0)
        .map(|(s, zk)| s / zk)
        .sum();
    (normalized, surrogate)
}

/// Draws an index with probability proportional to `mass`, skipping entries
/// flagged in `taken`. `None` when no mass is left.
fn draw_proportional(mass: &[f64], taken: &[bool], rng: &mut ChaCha8Rng) -> Option<usize> {
    let total: f64 = mass
        .iter()
        .zip(taken)
        .filter(|(_, &t)| !t)
        .map(|(m, _)| m)
        .sum();
    if !(total > 0.0) {
        return None;
    }
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = None;
    for (i, (&m, &t)) in mass.iter().zip(taken).enumerate() {
        if t || m <= 0.0 {
            continue;
        }
        acc += m;
        last = Some(i);
        if target < acc {
            return Some(i);
        }
    }
    last
}

/// Weighted KMeans++ seeding returning the chosen point indices.
///
/// The first seed is drawn proportional to `first_mass`, every later one
/// proportional to `weight × D²` where `D` is the distance to the nearest
/// seed so far. With `strict`, fewer positively weighted points than `k` is
/// an error. Whenever no mass is left, the next seed is drawn uniformly from
/// the unchosen (positively weighted, if `strict`) points.
pub(crate) fn seed_indices(
    points: &Matrix,
    weights: &[f64],
    first_mass: &[f64],
    k: usize,
    rng: &mut ChaCha8Rng,
    strict: bool,
) -> Result<Vec<usize>> {
    let n = points.rows();
    if k > n {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds {n} points")));
    }
    let usable = weights.iter().filter(|&&w| w > 0.0).count();
    if strict && k > usable {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds the {usable} points with positive weight"
        )));
    }

    let mut taken = vec![false; n];
    let mut chosen = Vec::with_capacity(k);
    let mut nearest = vec![f64::INFINITY; n];
    let mut mass: Vec<f64> = first_mass.to_vec();

    while chosen.len() < k {
        let pick = match draw_proportional(&mass, &taken, rng) {
            Some(i) => i,
            None if strict => {
                // duplicates of chosen seeds leave no D² mass
                let free: Vec<usize> = (0..n).filter(|&i| !taken[i] && weights[i] > 0.0).collect();
                free[rng.random_range(0..free.len())]
            }
            None => {
                let free: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
                free[rng.random_range(0..free.len())]
            }
        };
        taken[pick] = true;
        chosen.push(pick);
        let seed = points.row(pick);
        for i in 0..n {
            let d = sq_dist(points.row(i), seed);
            if d < nearest[i] {
                nearest[i] = d;
            }
            mass[i] = weights[i] * nearest[i];
        }
    }
    Ok(chosen)
}

/// KMeans++ seeds (K×D) sampled under `cfg.seed`.
pub fn kmeanspp_init(
    points: &Matrix,
    weights: &UncertaintyWeights,
    cfg: &ClusterConfig,
) -> Result<Matrix> {
    cfg.validate()?;
    check_weights(points, weights)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let idx = seed_indices(points, weights.values(), weights.values(), cfg.k, &mut rng, true)?;
    Ok(points.select_rows(&idx))
}

fn check_weights(points: &Matrix, weights: &UncertaintyWeights) -> Result<()> {
    if weights.len() != points.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} points",
            weights.len(),
            points.rows()
        )));
    }
    Ok(())
}

fn nearest_centroid(x: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.row_iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

struct LloydRun {
    centroids: Matrix,
    assignment: Vec<usize>,
    surrogate: f64,
    iterations: usize,
    trace: Vec<f64>,
}

fn lloyd(points: &Matrix, w: &[f64], mut centroids: Matrix, cfg: &ClusterConfig) -> LloydRun {
    let n = points.rows();
    let d = points.cols();
    let k = centroids.rows();
    let mut assignment = vec![0usize; n];
    let mut dist = vec![0.0; n];
    let mut trace = Vec::new();
    let mut iterations = 0;

    for _ in 0..cfg.max_iters {
        iterations += 1;

        // Assign
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let (j, dd) = nearest_centroid(points.row(i), &centroids);
            assignment[i] = j;
            dist[i] = dd;
            counts[j] += 1;
        }

        // Reseed empty sets at the point of largest weight × distance whose
        // own set would stay non-empty.
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let mut best: Option<(usize, f64)> = None;
            for i in 0..n {
                if counts[assignment[i]] < 2 {
                    continue;
                }
                let score = w[i] * dist[i];
                if best.is_none_or(|(_, s)| score > s) {
                    best = Some((i, score));
                }
            }
            if let Some((i, _)) = best {
                counts[assignment[i]] -= 1;
                assignment[i] = j;
                counts[j] = 1;
                dist[i] = 0.0;
                centroids.row_mut(j).copy_from_slice(points.row(i));
            }
        }

        // Update
        let mut sums = vec![0.0; k * d];
        let mut plain = vec![0.0; k * d];
        let mut z = vec![0.0; k];
        for i in 0..n {
            let a = assignment[i];
            z[a] += w[i];
            let row = points.row(i);
            for t in 0..d {
                sums[a * d + t] += w[i] * row[t];
                plain[a * d + t] += row[t];
            }
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let new: Vec<f64> = if z[j] > 0.0 {
                sums[j * d..(j + 1) * d].iter().map(|s| s / z[j]).collect()
            } else {
                // a set of zero-weight points: its objective term is zero
                // wherever the centre sits; use the plain mean
                let c = counts[j] as f64;
                plain[j * d..(j + 1) * d].iter().map(|s| s / c).collect()
            };
            shift = shift.max(sq_dist(&new, centroids.row(j)).sqrt());
            centroids.row_mut(j).copy_from_slice(&new);
        }

        let surrogate: f64 = (0..n)
            .map(|i| w[i] * sq_dist(points.row(i), centroids.row(assignment[i])))
            .sum();
        trace.push(surrogate);

        if shift < cfg.tol {
            break;
        }
    }

    let surrogate = *trace.last().expect("at least one iteration");
    LloydRun {
        centroids,
        assignment,
        surrogate,
        iterations,
        trace,
    }
}

/// Weighted K-Means with KMeans++ seeding; the best of `cfg.restarts` runs
/// (by surrogate objective, earliest wins ties) is returned.
pub fn weighted_kmeans(
    points: &Matrix,
    weights: &UncertaintyWeights,
    cfg: &ClusterConfig,
) -> Result<ClusterState> {
    cfg.validate()?;
    check_weights(points, weights)?;
    let n = points.rows();
    if cfg.k > n {
        return Err(Error::InvalidArgument(format!(
            "k = {} exceeds {n} points",
            cfg.k
        )));
    }
    let w = weights.values();
    if !w.iter().any(|&v| v > 0.0) {
        return Err(Error::InvalidArgument("all weights are zero".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<LloydRun> = None;
    for _ in 0..cfg.restarts {
        let idx = seed_indices(points, w, w, cfg.k, &mut rng, false)?;
        let run = lloyd(points, w, points.select_rows(&idx), cfg);
        if best.as_ref().is_none_or(|b| run.surrogate < b.surrogate) {
            best = Some(run);
        }
    }
    let best = best.expect("restarts >= 1");
    let (objective, _) = partition_objectives(points, w, &best.assignment, cfg.k);
    Ok(ClusterState {
        centroids: best.centroids,
        assignment: best.assignment,
        objective,
        surrogate_objective: best.surrogate,
        iterations_run: best.iterations,
        trace: best.trace,
    })
}

/// Population variance `(1/|X|) Σ ||x − mean||²` of a set of rows.
pub fn set_variance(points: &Matrix) -> Result<f64> {
    if points.rows() == 0 {
        return Err(Error::InvalidArgument("variance of an empty set".into()));
    }
    let mean = points.mean_row();
    let total: f64 = points.row_iter().map(|r| sq_dist(r, &mean)).sum();
    Ok(total / points.rows() as f64)
}

/// Weighted variance `(1/Σh) Σ h_i ||x_i − μ||²` around the weighted mean.
pub fn weighted_set_variance(points: &Matrix, weights: &[f64]) -> Result<f64> {
    if weights.len() != points.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} points",
            weights.len(),
            points.rows()
        )));
    }
    let z: f64 = weights.iter().sum();
    if !(z > 0.0) {
        return Err(Error::InvalidArgument("total weight must be positive".into()));
    }
    let mut mu = vec![0.0; points.cols()];
    for (r, &h) in points.row_iter().zip(weights) {
        for (m, x) in mu.iter_mut().zip(r) {
            *m += h * x;
        }
    }
    mu.iter_mut().for_each(|m| *m /= z);
    let total: f64 = points
        .row_iter()
        .zip(weights)
        .map(|(r, &h)| h * sq_dist(r, &mu))
        .sum();
    Ok(total / z)
}

/// For each centroid in index order, the closest eligible point not already
/// claimed by an earlier centroid. Ties go to the lower point index.
pub fn nearest_to_centroids(
    state: &ClusterState,
    points: &Matrix,
    eligible: &[usize],
) -> Result<Vec<usize>> {
    let k = state.k();
    if eligible.is_empty() || eligible.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} eligible points for {k} centroids",
            eligible.len()
        )));
    }
    if points.cols() != state.centroids.cols() {
        return Err(Error::DimensionMismatch(format!(
            "points have {} columns, centroids {}",
            points.cols(),
            state.centroids.cols()
        )));
    }
    let mut claimed = vec![false; points.rows()];
    let mut out = Vec::with_capacity(k);
    for c in state.centroids.row_iter() {
        let mut best: Option<(usize, f64)> = None;
        for &i in eligible {
            if claimed[i] {
                continue;
            }
            let d = sq_dist(points.row(i), c);
            let better = match best {
                None => true,
                Some((bi, bd)) => d < bd || (d == bd && i < bi),
            };
            if better {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("eligible.len() >= k");
        claimed[i] = true;
        out.push(i);
    }
    Ok(out)
}
