//! Independent oracles shared by the integration tests. Nothing here calls
//! into the library's numeric kernels; it only reads parameters and data.
#![allow(dead_code)]

use ada_clue::model::{Activation, Batch, LossWeights, NetworkParams};
use ada_clue::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Matrix::new(rows, cols, data).unwrap()
}

/// Random distributions over `c` classes with a mix of peaked, flat and
/// one-hot rows.
pub fn random_probs(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Matrix {
    let mut data = Vec::with_capacity(n * c);
    for _ in 0..n {
        match rng.random_range(0..10) {
            0 => {
                let hot = rng.random_range(0..c);
                data.extend((0..c).map(|k| if k == hot { 1.0 } else { 0.0 }));
            }
            1 => data.extend(std::iter::repeat_n(1.0 / c as f64, c)),
            _ => {
                let temp = rng.random_range(0.1..3.0);
                let e: Vec<f64> = (0..c)
                    .map(|_| (rng.random_range(-3.0..3.0f64) / temp).exp())
                    .collect();
                let s: f64 = e.iter().sum();
                data.extend(e.iter().map(|v| v / s));
            }
        }
    }
    Matrix::new(n, c, data).unwrap()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Relu => x.max(0.0),
        Activation::Tanh => x.tanh(),
        Activation::Identity => x,
    }
}

/// Scalar-loop forward pass: (embedding, logits) of one input.
pub fn forward_one(params: &NetworkParams, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut h = x.to_vec();
    for layer in &params.extractor {
        let w = &layer.linear.weight;
        h = (0..w.rows())
            .map(|o| {
                let z: f64 = (0..w.cols()).map(|i| w.get(o, i) * h[i]).sum();
                act(layer.activation, z + layer.linear.bias[o])
            })
            .collect();
    }
    let w = &params.classifier.weight;
    let logits = (0..w.rows())
        .map(|o| (0..w.cols()).map(|i| w.get(o, i) * h[i]).sum::<f64>() + params.classifier.bias[o])
        .collect();
    (h, logits)
}

pub fn probs_of(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn cross_entropy(logits: &[f64], y: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    lse - logits[y]
}

pub fn mean_ce(params: &NetworkParams, batch: &Batch) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let total: f64 = (0..batch.len())
        .map(|i| cross_entropy(&forward_one(params, batch.inputs.row(i)).1, batch.labels[i]))
        .sum();
    total / batch.len() as f64
}

pub fn mean_entropy(params: &NetworkParams, inputs: &Matrix) -> f64 {
    let total: f64 = (0..inputs.rows())
        .map(|i| entropy(&probs_of(&forward_one(params, inputs.row(i)).1)))
        .sum();
    total / inputs.rows() as f64
}

pub fn supervised_loss(params: &NetworkParams, src: &Batch, tl: &Batch, lw: &LossWeights) -> f64 {
    lw.lambda_s * mean_ce(params, src) + lw.lambda_t * mean_ce(params, tl)
}

pub fn random_network(rng: &mut ChaCha8Rng, input: usize, hidden: &[usize], classes: usize) -> NetworkParams {
    let act = if rng.random_bool(0.5) {
        Activation::Tanh
    } else {
        Activation::Identity
    };
    let mut p = NetworkParams::init(input, hidden, act, classes, rng).unwrap();
    // non-zero biases so every path is exercised
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    p
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize) -> Batch {
    let x = random_matrix(rng, n, dim, 2.0);
    let y = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(x, y).unwrap()
}

/// Worst mismatch between analytic gradients and central differences of
/// `loss`, per tensor `t` scaled by `sign(t)`. Returns the worst relative
/// error over entries whose absolute error exceeds the 1e-8 floor, and the
/// worst absolute error over all entries.
pub fn finite_difference_check(
    params: &NetworkParams,
    analytic: &NetworkParams,
    sign: impl Fn(usize) -> f64,
    loss: impl Fn(&NetworkParams) -> f64,
) -> (f64, f64) {
    let h = 1e-5;
    let mut worst_rel: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    let grads = analytic.tensors();
    let n_tensors = grads.len();
    for t in 0..n_tensors {
        for j in 0..grads[t].len() {
            let mut plus = params.clone();
            plus.tensors_mut()[t][j] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[t][j] -= h;
            let numeric = sign(t) * (loss(&plus) - loss(&minus)) / (2.0 * h);
            let a = grads[t][j];
            let abs = (a - numeric).abs();
            worst_abs = worst_abs.max(abs);
            if abs > 1e-8 {
                worst_rel = worst_rel.max(abs / a.abs().max(numeric.abs()));
            }
        }
    }
    (worst_rel, worst_abs)
}

fn weighted_objectives(points: &Matrix, w: &[f64], assign: &[usize], k: usize) -> (f64, f64) {
    let d = points.cols();
    let mut normalized = 0.0;
    let mut surrogate = 0.0;
    for c in 0..k {
        let members: Vec<usize> = (0..assign.len()).filter(|&i| assign[i] == c).collect();
        let z: f64 = members.iter().map(|&i| w[i]).sum();
        if z <= 0.0 {
            continue;
        }
        let mu: Vec<f64> = (0..d)
            .map(|t| members.iter().map(|&i| w[i] * points.get(i, t)).sum::<f64>() / z)
            .collect();
        let sse: f64 = members
            .iter()
            .map(|&i| w[i] * (0..d).map(|t| (points.get(i, t) - mu[t]).powi(2)).sum::<f64>())
            .sum();
        surrogate += sse;
        normalized += sse / z;
    }
    (normalized, surrogate)
}

/// Objectives of a given partition: `(Σ_k (1/Z_k) Σ w‖x−μ_k‖², Σ w‖x−μ_k‖²)`.
pub fn partition_cost(points: &Matrix, w: &[f64], assign: &[usize], k: usize) -> (f64, f64) {
    weighted_objectives(points, w, assign, k)
}

/// Minimum of both objectives over all `k^n` labelings.
pub fn brute_force_minima(points: &Matrix, w: &[f64], k: usize) -> (f64, f64) {
    let n = points.rows();
    let mut assign = vec![0usize; n];
    let mut best = (f64::INFINITY, f64::INFINITY);
    loop {
        let (norm, sur) = weighted_objectives(points, w, &assign, k);
        best.0 = best.0.min(norm);
        best.1 = best.1.min(sur);
        // odometer increment
        let mut pos = 0;
        loop {
            if pos == n {
                return best;
            }
            assign[pos] += 1;
            if assign[pos] < k {
                break;
            }
            assign[pos] = 0;
            pos += 1;
        }
    }
}

/// Textbook unweighted Lloyd from given centres: nearest centre (lowest
/// index on ties), plain means, stop when no centre moves more than `tol`.
/// An empty cluster takes the farthest point of a cluster with ≥2 members.
pub fn reference_lloyd(points: &Matrix, init: &Matrix, max_iters: usize, tol: f64) -> (Vec<usize>, Matrix) {
    let (n, d, k) = (points.rows(), points.cols(), init.rows());
    let mut centres: Vec<Vec<f64>> = (0..k).map(|j| init.row(j).to_vec()).collect();
    let mut assign = vec![0usize; n];
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    for _ in 0..max_iters {
        let mut dist = vec![0.0; n];
        for i in 0..n {
            let mut best = (0, f64::INFINITY);
            for (j, c) in centres.iter().enumerate() {
                let dd = sq(points.row(i), c);
                if dd < best.1 {
                    best = (j, dd);
                }
            }
            assign[i] = best.0;
            dist[i] = best.1;
        }
        for j in 0..k {
            let count = |a: &[usize], c: usize| a.iter().filter(|&&x| x == c).count();
            if count(&assign, j) > 0 {
                continue;
            }
            let mut far: Option<usize> = None;
            for i in 0..n {
                if count(&assign, assign[i]) >= 2 && far.is_none_or(|f| dist[i] > dist[f]) {
                    far = Some(i);
                }
            }
            if let Some(i) = far {
                assign[i] = j;
                dist[i] = 0.0;
                centres[j] = points.row(i).to_vec();
            }
        }
        let mut moved: f64 = 0.0;
        for (j, centre) in centres.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| assign[i] == j).collect();
            if members.is_empty() {
                continue;
            }
            let mean: Vec<f64> = (0..d)
                .map(|t| members.iter().map(|&i| points.get(i, t)).sum::<f64>() / members.len() as f64)
                .collect();
            moved = moved.max(sq(&mean, centre).sqrt());
            *centre = mean;
        }
        if moved < tol {
            break;
        }
    }
    let flat = centres.concat();
    (assign, Matrix::new(k, d, flat).unwrap())
}

/// `(1 / 2|X|²) Σ_i Σ_j ‖x_i − x_j‖²`.
pub fn pairwise_variance(points: &Matrix) -> f64 {
    let n = points.rows();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            total += points
                .row(i)
                .iter()
                .zip(points.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
    }
    total / (2.0 * (n * n) as f64)
}
