//! Domain-shifted datasets: synthetic generators, the IDX digit format,
//! CSV export, and the labelled/unlabeled target pool with its oracle.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    SourceTrain,
    TargetTrain,
    TargetTest,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::SourceTrain => "source_train",
            Split::TargetTrain => "target_train",
            Split::TargetTest => "target_test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source_train" => Ok(Split::SourceTrain),
            "target_train" => Ok(Split::TargetTrain),
            "target_test" => Ok(Split::TargetTest),
            _ => Err(Error::Format(format!("unknown split `{s}`"))),
        }
    }
}

/// Features, labels and a split tag per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    splits: Vec<Split>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        splits: Vec<Split>,
        num_classes: usize,
    ) -> Result<Self> {
        if labels.len() != features.rows() || splits.len() != features.rows() {
            return Err(Error::DimensionMismatch(format!(
                "{} rows, {} labels, {} split tags",
                features.rows(),
                labels.len(),
                splits.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        Ok(Self {
            features,
            labels,
            splits,
            num_classes,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Widens the class count, e.g. to align two datasets where one lacks
    /// the highest class.
    pub fn with_num_classes(mut self, num_classes: usize) -> Result<Self> {
        if let Some(&label) = self.labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        if num_classes < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        self.num_classes = num_classes;
        Ok(self)
    }

    /// Retags every row.
    pub fn with_split(mut self, split: Split) -> Self {
        self.splits = vec![split; self.len()];
        self
    }

    /// Rows in `indices`, keeping their tags.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            splits: indices.iter().map(|&i| self.splits[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Concatenates rows of datasets with the same width and class count.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut splits = Vec::new();
        for p in parts {
            if p.dim() != first.dim() || p.num_classes != first.num_classes {
                return Err(Error::DimensionMismatch(
                    "datasets differ in width or class count".into(),
                ));
            }
            data.extend_from_slice(p.features.as_slice());
            labels.extend_from_slice(&p.labels);
            splits.extend_from_slice(&p.splits);
        }
        let rows = labels.len();
        Dataset::new(Matrix::new(rows, first.dim(), data)?, labels, splits, first.num_classes)
    }

    /// Tags a random `test_fraction` of rows `target_test`, the rest
    /// `target_train`.
    pub fn split_target(self, test_fraction: f64, seed: u64) -> Result<Dataset> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::InvalidArgument(format!(
                "test fraction {test_fraction} outside [0, 1)"
            )));
        }
        let n = self.len();
        let n_test = (test_fraction * n as f64).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut splits = vec![Split::TargetTrain; n];
        for &i in &order[..n_test] {
            splits[i] = Split::TargetTest;
        }
        Ok(Dataset { splits, ..self })
    }

    /// CSV with header `feature_0,…,feature_{D−1},label,split`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("feature_{j}")).collect();
        header.push("label".into());
        header.push("split".into());
        out.write_record(&header).map_err(csv_err)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.features.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.labels[i].to_string());
            rec.push(self.splits[i].as_str().to_string());
            out.write_record(&rec).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads the layout written by [`write_csv`](Self::write_csv). The class
    /// count is one more than the largest label (at least 2).
    pub fn read_csv<R: Read>(r: R) -> Result<Dataset> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers().map_err(csv_err)?.clone();
        let cols = header.len();
        if cols < 3 || &header[cols - 2] != "label" || &header[cols - 1] != "split" {
            return Err(Error::Format(
                "csv header must end with `label,split`".into(),
            ));
        }
        let dim = cols - 2;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut splits = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let bad = |what: &str| Error::Format(format!("row {}: bad {what}", line + 1));
            for j in 0..dim {
                data.push(rec[j].trim().parse::<f64>().map_err(|_| bad("feature"))?);
            }
            labels.push(rec[dim].trim().parse::<usize>().map_err(|_| bad("label"))?);
            splits.push(rec[dim + 1].trim().parse::<Split>()?);
        }
        let num_classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
        let rows = labels.len();
        Dataset::new(Matrix::new(rows, dim, data)?, labels, splits, num_classes)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    GaussMixture,
    TwoMoons,
}

/// Recipe for a source/target pair of 2-D domains.
///
/// Source points come from class-conditional distributions. Target points
/// come from the same distributions with each class mean displaced by
/// `class_mean_shift` in a random per-class direction, noise scaled by
/// `noise_scale`, then rotated by `rotation` radians about the origin and
/// translated by `translation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub generator: Generator,
    pub num_classes: usize,
    pub source_count: usize,
    pub target_count: usize,
    pub target_test_fraction: f64,
    pub rotation: f64,
    pub translation: [f64; 2],
    pub class_mean_shift: f64,
    pub noise_scale: f64,
    /// Distance of the gaussian class means from the origin.
    pub class_radius: f64,
    /// Per-coordinate standard deviation of the class-conditional noise.
    pub class_std: f64,
    pub seed: u64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self {
            generator: Generator::GaussMixture,
            num_classes: 4,
            source_count: 2000,
            target_count: 2500,
            target_test_fraction: 0.2,
            rotation: 0.0,
            translation: [0.0, 0.0],
            class_mean_shift: 0.0,
            noise_scale: 1.0,
            class_radius: 3.0,
            class_std: 1.0,
            seed: 0,
        }
    }
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("num_classes must be at least 2".into()));
        }
        if self.generator == Generator::TwoMoons && self.num_classes != 2 {
            return Err(Error::InvalidArgument("two_moons has exactly 2 classes".into()));
        }
        if self.source_count == 0 || self.target_count == 0 {
            return Err(Error::InvalidArgument("sample counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.target_test_fraction) {
            return Err(Error::InvalidArgument(
                "target_test_fraction must be in [0, 1)".into(),
            ));
        }
        let finite = [
            self.rotation,
            self.translation[0],
            self.translation[1],
            self.class_mean_shift,
            self.noise_scale,
            self.class_radius,
            self.class_std,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite || self.noise_scale < 0.0 || self.class_std < 0.0 {
            return Err(Error::InvalidArgument("shift parameters must be finite, scales >= 0".into()));
        }
        Ok(())
    }
}

fn class_centre(spec: &ShiftSpec, class: usize) -> [f64; 2] {
    let angle = 2.0 * std::f64::consts::PI * class as f64 / spec.num_classes as f64;
    [spec.class_radius * angle.cos(), spec.class_radius * angle.sin()]
}

/// One noiseless draw of the class-conditional shape, plus the noise scale
/// to apply on top.
fn base_point(spec: &ShiftSpec, class: usize, rng: &mut ChaCha8Rng) -> ([f64; 2], f64) {
    match spec.generator {
        Generator::GaussMixture => (class_centre(spec, class), spec.class_std),
        Generator::TwoMoons => {
            let t = rng.random_range(0.0..std::f64::consts::PI);
            let p = if class == 0 {
                [t.cos(), t.sin()]
            } else {
                [1.0 - t.cos(), 0.5 - t.sin()]
            };
            // centre the pair of moons on the origin
            ([p[0] - 0.5, p[1] - 0.25], spec.class_std)
        }
    }
}

fn sample_domain(
    spec: &ShiftSpec,
    count: usize,
    offsets: Option<&[[f64; 2]]>,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Vec<usize>) {
    let mut labels: Vec<usize> = (0..count).map(|i| i % spec.num_classes).collect();
    labels.shuffle(rng);
    let (sin, cos) = spec.rotation.sin_cos();
    let mut data = Vec::with_capacity(2 * count);
    for &y in &labels {
        let (base, std) = base_point(spec, y, rng);
        let e0: f64 = StandardNormal.sample(rng);
        let e1: f64 = StandardNormal.sample(rng);
        let mut p = [base[0], base[1]];
        match offsets {
            None => {
                p[0] += std * e0;
                p[1] += std * e1;
            }
            Some(off) => {
                let s = std * spec.noise_scale;
                p[0] += off[y][0] + s * e0;
                p[1] += off[y][1] + s * e1;
                p = [
                    cos * p[0] - sin * p[1] + spec.translation[0],
                    sin * p[0] + cos * p[1] + spec.translation[1],
                ];
            }
        }
        data.extend_from_slice(&p);
    }
    (data, labels)
}

/// Samples a source dataset (all `source_train`) and a target dataset split
/// into `target_train` / `target_test`.
pub fn generate_shift(spec: &ShiftSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let offsets: Vec<[f64; 2]> = (0..spec.num_classes)
        .map(|_| {
            let a = rng.random_range(0.0..2.0 * std::f64::consts::PI);
            [spec.class_mean_shift * a.cos(), spec.class_mean_shift * a.sin()]
        })
        .collect();
    let (sx, sy) = sample_domain(spec, spec.source_count, None, &mut rng);
    let (tx, ty) = sample_domain(spec, spec.target_count, Some(&offsets), &mut rng);
    let source = Dataset::new(
        Matrix::new(spec.source_count, 2, sx)?,
        sy,
        vec![Split::SourceTrain; spec.source_count],
        spec.num_classes,
    )?;
    let target = Dataset::new(
        Matrix::new(spec.target_count, 2, tx)?,
        ty,
        vec![Split::TargetTrain; spec.target_count],
        spec.num_classes,
    )?
    .split_target(spec.target_test_fraction, spec.seed ^ 0x5eed_7e57)?;
    Ok((source, target))
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Parses IDX image bytes into `(count, rows·cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("images: bad magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, "images")? as usize;
    let h = be_u32(bytes, 8, "images")? as usize;
    let w = be_u32(bytes, 12, "images")? as usize;
    let len = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::Format("images: size overflow".into()))?;
    let payload = &bytes[16..];
    if payload.len() < len {
        return Err(Error::Format(format!(
            "images: truncated payload ({} of {len} bytes)",
            payload.len()
        )));
    }
    if payload.len() > len {
        return Err(Error::Format("images: trailing bytes".into()));
    }
    Ok((n, h * w, payload.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("labels: bad magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, "labels")? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(Error::Format(format!(
            "labels: truncated payload ({} of {n} bytes)",
            payload.len()
        )));
    }
    if payload.len() > n {
        return Err(Error::Format("labels: trailing bytes".into()));
    }
    Ok(payload.to_vec())
}

/// Loads an IDX image/label file pair. Pixels are scaled to `[0, 1]`; rows
/// are tagged `source_train` (retag with [`Dataset::with_split`]).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (n, dim, pixels) = parse_idx_images(&read_file(images_path)?)?;
    let labels = parse_idx_labels(&read_file(labels_path)?)?;
    if labels.len() != n {
        return Err(Error::Format(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    let features = Matrix::new(n, dim, pixels.iter().map(|&p| p as f64 / 255.0).collect())?;
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let num_classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
    Dataset::new(features, labels, vec![Split::SourceTrain; n], num_classes)
}

pub fn encode_idx_images(rows: usize, cols: usize, images: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in images {
        out.extend_from_slice(img);
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Labelled and unlabeled target-train indices. Indices only ever move from
/// unlabeled to labeled, and each label is revealed once.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolState {
    target_train: HashSet<usize>,
    labeled: Vec<usize>,
    labeled_labels: Vec<usize>,
    unlabeled: Vec<usize>,
    budget_cap: Option<usize>,
}

impl PoolState {
    /// Every `target_train` row of `target` starts unlabeled. `budget_cap`
    /// bounds the total number of labels the oracle will ever reveal.
    pub fn new(target: &Dataset, budget_cap: Option<usize>) -> Self {
        let unlabeled = target.indices_of(Split::TargetTrain);
        Self {
            target_train: unlabeled.iter().copied().collect(),
            labeled: Vec::new(),
            labeled_labels: Vec::new(),
            unlabeled,
            budget_cap,
        }
    }

    /// Labelled indices in acquisition order.
    pub fn labeled(&self) -> &[usize] {
        &self.labeled
    }

    pub fn labeled_labels(&self) -> &[usize] {
        &self.labeled_labels
    }

    /// Unlabeled indices, ascending.
    pub fn unlabeled(&self) -> &[usize] {
        &self.unlabeled
    }

    pub fn is_target_train(&self, index: usize) -> bool {
        self.target_train.contains(&index)
    }

    /// Reveals labels for `indices`, moving them to the labelled set. The
    /// request is checked in full before anything moves.
    pub fn oracle_label(&mut self, dataset: &Dataset, indices: &[usize]) -> Result<Vec<usize>> {
        let labeled: HashSet<usize> = self.labeled.iter().copied().collect();
        let mut seen = HashSet::new();
        for &i in indices {
            if !self.target_train.contains(&i) {
                if dataset.splits().get(i) == Some(&Split::TargetTest) {
                    return Err(Error::Leakage(i));
                }
                return Err(Error::Pool(format!("index {i} is not a target-train instance")));
            }
            if labeled.contains(&i) || !seen.insert(i) {
                return Err(Error::Pool(format!("index {i} is already labeled")));
            }
        }
        if let Some(cap) = self.budget_cap {
            if self.labeled.len() + indices.len() > cap {
                return Err(Error::Pool(format!(
                    "request for {} labels exceeds the remaining budget of {}",
                    indices.len(),
                    cap - self.labeled.len()
                )));
            }
        }
        let revealed: Vec<usize> = indices.iter().map(|&i| dataset.labels()[i]).collect();
        self.labeled.extend_from_slice(indices);
        self.labeled_labels.extend_from_slice(&revealed);
        self.unlabeled.retain(|i| !seen.contains(i));
        debug_assert!(self.check_partition().is_ok());
        Ok(revealed)
    }

    /// `labeled ∩ unlabeled = ∅` and `labeled ∪ unlabeled = target_train`.
    pub fn check_partition(&self) -> Result<()> {
        let l: HashSet<usize> = self.labeled.iter().copied().collect();
        let u: HashSet<usize> = self.unlabeled.iter().copied().collect();
        if l.len() != self.labeled.len() || u.len() != self.unlabeled.len() {
            return Err(Error::Pool("duplicate index in pool".into()));
        }
        if !l.is_disjoint(&u) {
            return Err(Error::Pool("labeled and unlabeled sets overlap".into()));
        }
        if l.len() + u.len() != self.target_train.len() || !l.union(&u).all(|i| self.target_train.contains(i)) {
            return Err(Error::Pool("pool does not cover target-train".into()));
        }
        Ok(())
    }
}
