//! Per-instance uncertainty scores and the entropy-based implicit domain
//! classifier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

const NORMALIZATION_TOL: f64 = 1e-9;

/// Which uncertainty measure backs a weight vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightKind {
    Entropy,
    Margin,
    Uniform,
}

impl WeightKind {
    pub const ALL: [WeightKind; 3] = [WeightKind::Entropy, WeightKind::Margin, WeightKind::Uniform];

    pub fn as_str(self) -> &'static str {
        match self {
            WeightKind::Entropy => "entropy",
            WeightKind::Margin => "margin",
            WeightKind::Uniform => "uniform",
        }
    }
}

impl std::str::FromStr for WeightKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WeightKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown weight kind `{s}` (expected entropy, margin or uniform)"
                ))
            })
    }
}

/// Non-negative per-instance weights, larger meaning more uncertain.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyWeights {
    values: Vector,
    kind: WeightKind,
}

impl UncertaintyWeights {
    /// Weights of the given kind computed from a row-stochastic matrix.
    pub fn from_probs(probs: &Matrix, kind: WeightKind) -> Result<Self> {
        let values = match kind {
            WeightKind::Entropy => entropy_rows(probs)?,
            WeightKind::Margin => margin_weights(probs)?,
            WeightKind::Uniform => Vector::from_raw(vec![1.0; probs.rows()]),
        };
        Ok(Self { values, kind })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            values: Vector::from_raw(vec![1.0; n]),
            kind: WeightKind::Uniform,
        }
    }

    /// Arbitrary caller-supplied weights. Tagged `entropy` unless all ones.
    pub fn custom(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weight {i} must be finite and non-negative"
            )));
        }
        let kind = if values.iter().all(|&v| v == 1.0) {
            WeightKind::Uniform
        } else {
            WeightKind::Entropy
        };
        Ok(Self {
            values: Vector::from_raw(values),
            kind,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> WeightKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn check_normalized(probs: &Matrix) -> Result<()> {
    for (row, r) in probs.row_iter().enumerate() {
        let sum: f64 = r.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL || r.iter().any(|&p| p < 0.0) {
            return Err(Error::NotNormalized { row, sum });
        }
    }
    Ok(())
}

fn row_entropy(r: &[f64]) -> f64 {
    let h: f64 = r
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    // rounding can leave tiny negatives on near one-hot rows
    h.max(0.0)
}

/// Predictive entropy `H_i = −Σ_c p_ic ln p_ic` per row, with `0·ln 0 = 0`.
pub fn entropy_rows(probs: &Matrix) -> Result<Vector> {
    check_normalized(probs)?;
    Ok(Vector::from_raw(probs.row_iter().map(row_entropy).collect()))
}

fn top_two(r: &[f64]) -> (f64, f64) {
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &p in r {
        if p > first {
            second = first;
            first = p;
        } else if p > second {
            second = p;
        }
    }
    (first, second)
}

/// Gap between the two largest probabilities of each row, in `[0, 1]`.
pub fn margin_rows(probs: &Matrix) -> Result<Vector> {
    if probs.cols() < 2 {
        return Err(Error::InvalidArgument(format!(
            "margin needs at least 2 classes, got {}",
            probs.cols()
        )));
    }
    check_normalized(probs)?;
    Ok(Vector::from_raw(
        probs
            .row_iter()
            .map(|r| {
                let (a, b) = top_two(r);
                (a - b).clamp(0.0, 1.0)
            })
            .collect(),
    ))
}

/// `1 − margin`, so that larger means more uncertain.
pub fn margin_weights(probs: &Matrix) -> Result<Vector> {
    let m = margin_rows(probs)?;
    Ok(Vector::from_raw(m.iter().map(|v| 1.0 - v).collect()))
}

/// Probability of belonging to the target domain under the implicit
/// entropy-based domain classifier: `H / ln C`.
pub fn targetness(probs: &Matrix, num_classes: usize) -> Result<Vector> {
    if num_classes != probs.cols() {
        return Err(Error::DimensionMismatch(format!(
            "num_classes {num_classes} but probs have {} columns",
            probs.cols()
        )));
    }
    if num_classes < 2 {
        return Err(Error::InvalidArgument(
            "targetness needs at least 2 classes".into(),
        ));
    }
    let log_c = (num_classes as f64).ln();
    let h = entropy_rows(probs)?;
    Ok(Vector::from_raw(
        h.iter().map(|v| (v / log_c).clamp(0.0, 1.0)).collect(),
    ))
}

/// Entropy threshold for the hard domain classifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainnessConfig {
    gamma: f64,
}

impl DomainnessConfig {
    pub fn new(gamma: f64, num_classes: usize) -> Result<Self> {
        let max = (num_classes as f64).ln();
        if !(0.0..=max).contains(&gamma) {
            return Err(Error::InvalidArgument(format!(
                "gamma {gamma} outside [0, ln {num_classes}]"
            )));
        }
        Ok(Self { gamma })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

/// 1 where `H ≥ γ` (target-like), else 0.
pub fn hard_domain_label(probs: &Matrix, cfg: DomainnessConfig) -> Result<Vec<u8>> {
    let h = entropy_rows(probs)?;
    Ok(h.iter().map(|&v| u8::from(v >= cfg.gamma)).collect())
}
