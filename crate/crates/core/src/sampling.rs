//! Batch label-acquisition strategies.
//!
//! Every strategy receives the unlabeled target pool (embeddings, logits and
//! temperature-scaled class posteriors, row-aligned with the pool's global
//! indices) and returns `budget` distinct global indices. Ties are always
//! broken toward the lower global index.

use std::cmp::Ordering;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{nearest_to_centroids, seed_indices, weighted_kmeans, ClusterConfig};
use crate::error::{Error, Result};
use crate::numerics::{argmax, sq_dist, Matrix};
use crate::uncertainty::{entropy_rows, margin_rows, targetness, UncertaintyWeights, WeightKind};

/// Smoothing term in the importance-weighted acquisition score.
const AADA_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyName {
    Clue,
    Uniform,
    Entropy,
    Margin,
    Coreset,
    Badge,
    Aada,
}

impl StrategyName {
    pub const ALL: [StrategyName; 7] = [
        StrategyName::Clue,
        StrategyName::Uniform,
        StrategyName::Entropy,
        StrategyName::Margin,
        StrategyName::Coreset,
        StrategyName::Badge,
        StrategyName::Aada,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyName::Clue => "clue",
            StrategyName::Uniform => "uniform",
            StrategyName::Entropy => "entropy",
            StrategyName::Margin => "margin",
            StrategyName::Coreset => "coreset",
            StrategyName::Badge => "badge",
            StrategyName::Aada => "aada",
        }
    }
}

impl std::fmt::Display for StrategyName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for StrategyName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = StrategyName::ALL.iter().map(|n| n.as_str()).collect();
                Error::InvalidArgument(format!(
                    "unknown strategy `{s}` (valid: {})",
                    valid.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub name: StrategyName,
    /// Softmax temperature of the posteriors handed to the strategy.
    pub temperature: f64,
    pub clue_weight_kind: WeightKind,
    pub aada_top_fraction: f64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            name: StrategyName::Clue,
            temperature: 1.0,
            clue_weight_kind: WeightKind::Entropy,
            aada_top_fraction: 0.02,
        }
    }
}

impl StrategyConfig {
    pub fn named(name: StrategyName) -> Self {
        Self {
            name,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.aada_top_fraction > 0.0 && self.aada_top_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "aada_top_fraction must be in (0, 1], got {}",
                self.aada_top_fraction
            )));
        }
        Ok(())
    }
}

/// The unlabeled target pool as seen by a strategy.
#[derive(Debug, Clone, Copy)]
pub struct AcquisitionRequest<'a> {
    pub budget: usize,
    pub embeddings: &'a Matrix,
    /// Posteriors at the strategy temperature.
    pub probs: &'a Matrix,
    pub logits: &'a Matrix,
    pub unlabeled_indices: &'a [usize],
    pub rng_seed: u64,
}

impl AcquisitionRequest<'_> {
    pub fn validate(&self) -> Result<()> {
        let n = self.unlabeled_indices.len();
        if self.budget == 0 || self.budget > n {
            return Err(Error::InvalidArgument(format!(
                "budget {} must be in 1..={n}",
                self.budget
            )));
        }
        for (name, m) in [
            ("embeddings", self.embeddings),
            ("probs", self.probs),
            ("logits", self.logits),
        ] {
            if m.rows() != n {
                return Err(Error::DimensionMismatch(format!(
                    "{name} has {} rows for {n} unlabeled indices",
                    m.rows()
                )));
            }
        }
        if self.probs.cols() != self.logits.cols() {
            return Err(Error::DimensionMismatch(
                "probs and logits disagree on the number of classes".into(),
            ));
        }
        let mut sorted = self.unlabeled_indices.to_vec();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("duplicate unlabeled index".into()));
        }
        Ok(())
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.rng_seed)
    }

    fn to_global(self, local: impl IntoIterator<Item = usize>) -> Vec<usize> {
        local
            .into_iter()
            .map(|i| self.unlabeled_indices[i])
            .collect()
    }

    /// Local positions ordered by `score` (descending when `highest`),
    /// ties by lower global index.
    fn ranked(&self, score: &[f64], highest: bool) -> Vec<usize> {
        let mut order: Vec<usize> = (0..score.len()).collect();
        order.sort_by(|&a, &b| {
            let by_score = if highest {
                score[b].total_cmp(&score[a])
            } else {
                score[a].total_cmp(&score[b])
            };
            by_score.then(self.unlabeled_indices[a].cmp(&self.unlabeled_indices[b]))
        });
        order
    }
}

/// Result of a strategy: the selected global indices plus, for the
/// clustering strategy, both clustering objectives.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub cluster_objective: Option<f64>,
    pub cluster_surrogate: Option<f64>,
}

impl Selection {
    fn plain(indices: Vec<usize>) -> Self {
        Self {
            indices,
            cluster_objective: None,
            cluster_surrogate: None,
        }
    }
}

/// Runs the configured strategy. `labeled_embeddings` are only read by
/// coreset.
pub fn select(
    req: &AcquisitionRequest<'_>,
    cfg: &StrategyConfig,
    labeled_embeddings: &Matrix,
) -> Result<Selection> {
    cfg.validate()?;
    req.validate()?;
    match cfg.name {
        StrategyName::Clue => select_clue_detailed(req, cfg),
        StrategyName::Uniform => select_uniform(req).map(Selection::plain),
        StrategyName::Entropy => select_entropy(req).map(Selection::plain),
        StrategyName::Margin => select_margin(req).map(Selection::plain),
        StrategyName::Coreset => select_coreset(req, labeled_embeddings).map(Selection::plain),
        StrategyName::Badge => select_badge(req).map(Selection::plain),
        StrategyName::Aada => select_aada(req, cfg).map(Selection::plain),
    }
}

/// Uncertainty-weighted K-Means with `K = budget` over the pool embeddings,
/// then the nearest pool point to each centroid.
pub fn select_clue(req: &AcquisitionRequest<'_>, cfg: &StrategyConfig) -> Result<Vec<usize>> {
    select_clue_detailed(req, cfg).map(|s| s.indices)
}

fn select_clue_detailed(req: &AcquisitionRequest<'_>, cfg: &StrategyConfig) -> Result<Selection> {
    req.validate()?;
    let weights = UncertaintyWeights::from_probs(req.probs, cfg.clue_weight_kind)?;
    let weights = if weights.values().iter().any(|&w| w > 0.0) {
        weights
    } else {
        // every posterior is one-hot: no uncertainty signal left, so fall
        // back to plain K-Means
        UncertaintyWeights::uniform(weights.len())
    };
    let state = weighted_kmeans(
        req.embeddings,
        &weights,
        &ClusterConfig::new(req.budget, req.rng_seed),
    )?;
    let eligible: Vec<usize> = (0..req.embeddings.rows()).collect();
    let local = nearest_to_centroids(&state, req.embeddings, &eligible)?;
    Ok(Selection {
        indices: req.to_global(local),
        cluster_objective: Some(state.objective),
        cluster_surrogate: Some(state.surrogate_objective),
    })
}

/// Top-`budget` predictive entropy.
pub fn select_entropy(req: &AcquisitionRequest<'_>) -> Result<Vec<usize>> {
    req.validate()?;
    let h = entropy_rows(req.probs)?;
    let order = req.ranked(&h, true);
    Ok(req.to_global(order.into_iter().take(req.budget)))
}

/// Bottom-`budget` top-2 margin.
pub fn select_margin(req: &AcquisitionRequest<'_>) -> Result<Vec<usize>> {
    req.validate()?;
    let m = margin_rows(req.probs)?;
    let order = req.ranked(&m, false);
    Ok(req.to_global(order.into_iter().take(req.budget)))
}

/// Greedy K-Center: repeatedly take the pool point farthest from everything
/// covered so far (labeled points plus earlier picks). With nothing labeled
/// the first pick is the point farthest from the pool mean.
pub fn select_coreset(req: &AcquisitionRequest<'_>, labeled_embeddings: &Matrix) -> Result<Vec<usize>> {
    req.validate()?;
    let emb = req.embeddings;
    if labeled_embeddings.rows() > 0 && labeled_embeddings.cols() != emb.cols() {
        return Err(Error::DimensionMismatch(format!(
            "labeled embeddings have {} columns, pool {}",
            labeled_embeddings.cols(),
            emb.cols()
        )));
    }
    let n = emb.rows();
    let mut min_dist: Vec<f64> = if labeled_embeddings.rows() == 0 {
        let mean = emb.mean_row();
        emb.row_iter().map(|r| sq_dist(r, &mean)).collect()
    } else {
        emb.row_iter()
            .map(|r| {
                labeled_embeddings
                    .row_iter()
                    .map(|l| sq_dist(r, l))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    let mut taken = vec![false; n];
    let mut picks = Vec::with_capacity(req.budget);
    for _ in 0..req.budget {
        let mut best: Option<usize> = None;
        for i in (0..n).filter(|&i| !taken[i]) {
            best = match best {
                None => Some(i),
                Some(b) => match min_dist[i].total_cmp(&min_dist[b]) {
                    Ordering::Greater => Some(i),
                    Ordering::Equal if req.unlabeled_indices[i] < req.unlabeled_indices[b] => Some(i),
                    _ => Some(b),
                },
            };
        }
        let pick = best.expect("budget <= pool size");
        taken[pick] = true;
        picks.push(pick);
        let row = emb.row(pick);
        if picks.len() == 1 && labeled_embeddings.rows() == 0 {
            // coverage starts from the first pick, not the pool mean
            min_dist = emb.row_iter().map(|r| sq_dist(r, row)).collect();
        } else {
            for (i, d) in min_dist.iter_mut().enumerate() {
                *d = d.min(sq_dist(emb.row(i), row));
            }
        }
    }
    Ok(req.to_global(picks))
}

/// Gradient of the pseudo-labelled cross-entropy with respect to the final
/// linear layer: `(p − onehot(argmax p)) ⊗ φ(x)`, flattened class-major
/// (`out[c·D + d]`).
pub fn badge_gradient_embeddings(probs: &Matrix, embeddings: &Matrix) -> Result<Matrix> {
    if probs.rows() != embeddings.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} posterior rows for {} embeddings",
            probs.rows(),
            embeddings.rows()
        )));
    }
    let c = probs.cols();
    let d = embeddings.cols();
    let mut out = Vec::with_capacity(probs.rows() * c * d);
    for (p, phi) in probs.row_iter().zip(embeddings.row_iter()) {
        let yhat = argmax(p);
        for (class, &pc) in p.iter().enumerate() {
            let coef = if class == yhat { pc - 1.0 } else { pc };
            out.extend(phi.iter().map(|x| coef * x));
        }
    }
    Ok(Matrix::from_raw(probs.rows(), c * d, out))
}

/// KMeans++ seeding on gradient embeddings; the seeds are the batch. The
/// first seed is drawn proportional to `||g||²`.
pub fn select_badge(req: &AcquisitionRequest<'_>) -> Result<Vec<usize>> {
    req.validate()?;
    let g = badge_gradient_embeddings(req.probs, req.embeddings)?;
    let norms: Vec<f64> = g.row_iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
    let ones = vec![1.0; g.rows()];
    let mut rng = req.rng();
    let picks = seed_indices(&g, &ones, &norms, req.budget, &mut rng, false)?;
    Ok(req.to_global(picks))
}

/// Importance-weighted score `targetness / (1 − targetness + ε) · H`, where
/// targetness is the entropy-based domain probability `H / ln C`.
pub fn aada_scores(probs: &Matrix) -> Result<Vec<f64>> {
    let h = entropy_rows(probs)?;
    let t = targetness(probs, probs.cols())?;
    Ok(h.iter()
        .zip(t.iter())
        .map(|(&h, &t)| t / (1.0 - t + AADA_EPS) * h)
        .collect())
}

/// Uniform draw of `budget` points from the top-scoring fraction of the pool.
pub fn select_aada(req: &AcquisitionRequest<'_>, cfg: &StrategyConfig) -> Result<Vec<usize>> {
    req.validate()?;
    cfg.validate()?;
    let scores = aada_scores(req.probs)?;
    let n = scores.len();
    let cut = ((cfg.aada_top_fraction * n as f64).ceil() as usize)
        .max(req.budget)
        .min(n);
    let candidates: Vec<usize> = req.ranked(&scores, true).into_iter().take(cut).collect();
    let mut rng = req.rng();
    let picks = sample(&mut rng, cut, req.budget).into_iter().map(|j| candidates[j]);
    Ok(req.to_global(picks))
}

/// `budget` pool points drawn uniformly without replacement.
pub fn select_uniform(req: &AcquisitionRequest<'_>) -> Result<Vec<usize>> {
    req.validate()?;
    let mut rng = req.rng();
    let picks = sample(&mut rng, req.unlabeled_indices.len(), req.budget);
    Ok(req.to_global(picks))
}
