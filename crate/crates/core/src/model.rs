//! Two-part network: a stack of dense layers (the feature extractor) followed
//! by a linear classifier, with hand-written backpropagation.
//!
//! The minimax-entropy objective is realized with a gradient-reversal
//! contract at the extractor/classifier boundary: the entropy gradient is
//! subtracted from the classifier's gradient (so the classifier ascends
//! target entropy) and added to the extractor's (so it descends it).

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation `a` and output `h`.
    fn derivative(self, a: f64, h: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - h * h,
            Activation::Identity => 1.0,
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Identity),
            _ => Err(Error::Format(format!("unknown activation code {c}"))),
        }
    }
}

/// `y = W x + b` with `W` stored as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::DimensionMismatch(format!(
                "bias of length {} for {} outputs",
                bias.len(),
                weight.rows()
            )));
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidArgument("non-finite bias".into()));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(outputs: usize, inputs: usize) -> Self {
        Self {
            weight: Matrix::zeros(outputs, inputs),
            bias: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    fn glorot<R: Rng + ?Sized>(outputs: usize, inputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let data = (0..outputs * inputs)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Self {
            weight: Matrix::from_raw(outputs, inputs, data),
            bias: vec![0.0; outputs],
        }
    }

    /// `x Wᵀ + b` for a batch `x`.
    fn forward(&self, x: &Matrix) -> Matrix {
        let mut out = x.matmul_t(&self.weight).expect("shapes checked");
        for i in 0..out.rows() {
            for (v, b) in out.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorLayer {
    pub linear: Linear,
    pub activation: Activation,
}

/// Feature extractor layers plus the linear classifier. The same type
/// doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub extractor: Vec<ExtractorLayer>,
    pub classifier: Linear,
}

pub type Gradients = NetworkParams;

impl NetworkParams {
    pub fn new(extractor: Vec<ExtractorLayer>, classifier: Linear) -> Result<Self> {
        let p = Self {
            extractor,
            classifier,
        };
        p.check_shapes()?;
        Ok(p)
    }

    /// Glorot-uniform weights and zero biases.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        activation: Activation,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || num_classes < 2 || hidden.contains(&0) {
            return Err(Error::InvalidArgument(
                "network dimensions must be positive with at least 2 classes".into(),
            ));
        }
        let mut extractor = Vec::with_capacity(hidden.len());
        let mut fan_in = input_dim;
        for &width in hidden {
            extractor.push(ExtractorLayer {
                linear: Linear::glorot(width, fan_in, rng),
                activation,
            });
            fan_in = width;
        }
        let classifier = Linear::glorot(num_classes, fan_in, rng);
        Self::new(extractor, classifier)
    }

    fn check_shapes(&self) -> Result<()> {
        for pair in self.extractor.windows(2) {
            if pair[0].linear.outputs() != pair[1].linear.inputs() {
                return Err(Error::DimensionMismatch(format!(
                    "layer of width {} feeds a layer expecting {}",
                    pair[0].linear.outputs(),
                    pair[1].linear.inputs()
                )));
            }
        }
        if let Some(last) = self.extractor.last() {
            if last.linear.outputs() != self.classifier.inputs() {
                return Err(Error::DimensionMismatch(format!(
                    "embedding width {} but classifier expects {}",
                    last.linear.outputs(),
                    self.classifier.inputs()
                )));
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            extractor: self
                .extractor
                .iter()
                .map(|l| ExtractorLayer {
                    linear: Linear::zeros(l.linear.outputs(), l.linear.inputs()),
                    activation: l.activation,
                })
                .collect(),
            classifier: Linear::zeros(self.classifier.outputs(), self.classifier.inputs()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.extractor
            .first()
            .map_or(self.classifier.inputs(), |l| l.linear.inputs())
    }

    pub fn embedding_dim(&self) -> usize {
        self.classifier.inputs()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.outputs()
    }

    /// Number of parameter tensors belonging to the extractor; they come
    /// first in [`tensors`](Self::tensors) order.
    pub fn num_extractor_tensors(&self) -> usize {
        2 * self.extractor.len()
    }

    /// All parameter tensors: extractor (weight, bias) pairs, then the
    /// classifier weight and bias.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.num_extractor_tensors() + 2);
        for l in &self.extractor {
            out.push(l.linear.weight.as_slice());
            out.push(&l.linear.bias[..]);
        }
        out.push(self.classifier.weight.as_slice());
        out.push(&self.classifier.bias[..]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.num_extractor_tensors() + 2);
        for l in &mut self.extractor {
            out.push(l.linear.weight.as_mut_slice());
            out.push(&mut l.linear.bias[..]);
        }
        out.push(self.classifier.weight.as_mut_slice());
        out.push(&mut self.classifier.bias[..]);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, inputs: &Matrix) -> Result<()> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "inputs have {} features, network expects {}",
                inputs.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Adds `scale · other` in place.
    pub fn axpy(&mut self, scale: f64, other: &Self) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }
}

struct ForwardCache {
    /// Layer inputs: `inputs[0]` is the batch, `inputs[l]` the output of layer `l − 1`.
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
    embeddings: Matrix,
    logits: Matrix,
}

fn forward_cached(params: &NetworkParams, inputs: &Matrix) -> ForwardCache {
    let mut layer_inputs = Vec::with_capacity(params.extractor.len() + 1);
    let mut pre = Vec::with_capacity(params.extractor.len());
    let mut h = inputs.clone();
    for layer in &params.extractor {
        let a = layer.linear.forward(&h);
        let mut out = a.clone();
        out.as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = layer.activation.apply(*v));
        layer_inputs.push(std::mem::replace(&mut h, out));
        pre.push(a);
    }
    let logits = params.classifier.forward(&h);
    ForwardCache {
        inputs: layer_inputs,
        pre_activations: pre,
        embeddings: h,
        logits,
    }
}

/// Embeddings (extractor output) and logits for a batch.
pub fn forward(params: &NetworkParams, inputs: &Matrix) -> Result<(Matrix, Matrix)> {
    params.check_input(inputs)?;
    let c = forward_cached(params, inputs);
    if !c.logits.is_finite() {
        return Err(Error::InvalidArgument("forward pass produced non-finite logits".into()));
    }
    Ok((c.embeddings, c.logits))
}

/// `gW += dYᵀ X`, `gb += colsum(dY)`; returns `dX = dY W`.
fn linear_backward(layer: &Linear, x: &Matrix, dy: &Matrix, grad: &mut Linear) -> Matrix {
    let (n, out, inp) = (x.rows(), layer.outputs(), layer.inputs());
    let gw = grad.weight.as_mut_slice();
    for i in 0..n {
        let dyi = dy.row(i);
        let xi = x.row(i);
        for o in 0..out {
            let g = dyi[o];
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            for (w, xv) in gw[o * inp..(o + 1) * inp].iter_mut().zip(xi) {
                *w += g * xv;
            }
        }
    }
    let w = layer.weight.as_slice();
    let mut dx = vec![0.0; n * inp];
    for i in 0..n {
        let dyi = dy.row(i);
        let dst = &mut dx[i * inp..(i + 1) * inp];
        for o in 0..out {
            let g = dyi[o];
            if g == 0.0 {
                continue;
            }
            for (d, wv) in dst.iter_mut().zip(&w[o * inp..(o + 1) * inp]) {
                *d += g * wv;
            }
        }
    }
    Matrix::from_raw(n, inp, dx)
}

/// Accumulates parameter gradients for an upstream gradient on the logits.
fn backward(params: &NetworkParams, cache: &ForwardCache, dlogits: &Matrix, grads: &mut Gradients) {
    let mut dh = linear_backward(&params.classifier, &cache.embeddings, dlogits, &mut grads.classifier);
    for l in (0..params.extractor.len()).rev() {
        let layer = &params.extractor[l];
        let a = &cache.pre_activations[l];
        let h = if l + 1 < params.extractor.len() {
            &cache.inputs[l + 1]
        } else {
            &cache.embeddings
        };
        for ((d, &av), &hv) in dh.as_mut_slice().iter_mut().zip(a.as_slice()).zip(h.as_slice()) {
            *d *= layer.activation.derivative(av, hv);
        }
        dh = linear_backward(&layer.linear, &cache.inputs[l], &dh, &mut grads.extractor[l].linear);
    }
}

fn log_softmax_row(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(z) {
        *o = v - lse;
    }
}

/// Labelled batch of inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} inputs with {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            inputs: Matrix::zeros(0, dim),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Weights of the labelled source term, the labelled target term and the
/// target entropy term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_t: f64,
    pub lambda_h: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_s: 0.1,
            lambda_t: 1.0,
            lambda_h: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_s", self.lambda_s),
            ("lambda_t", self.lambda_t),
            ("lambda_h", self.lambda_h),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Mean cross-entropy of a batch scaled by `weight`; gradients accumulate
/// into `grads`.
fn weighted_ce(
    params: &NetworkParams,
    batch: &Batch,
    weight: f64,
    grads: &mut Gradients,
) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    params.check_input(&batch.inputs)?;
    let c = params.num_classes();
    if let Some(&label) = batch.labels.iter().find(|&&y| y >= c) {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: c,
        });
    }
    let cache = forward_cached(params, &batch.inputs);
    let n = batch.len() as f64;
    let mut dz = Matrix::zeros(batch.len(), c);
    let mut logp = vec![0.0; c];
    let mut loss = 0.0;
    for (i, &y) in batch.labels.iter().enumerate() {
        log_softmax_row(cache.logits.row(i), &mut logp);
        loss -= logp[y];
        let row = dz.row_mut(i);
        for (k, d) in row.iter_mut().enumerate() {
            *d = weight * logp[k].exp() / n;
        }
        row[y] -= weight / n;
    }
    if weight != 0.0 {
        backward(params, &cache, &dz, grads);
    }
    Ok(weight * loss / n)
}

/// `λ_S · CE(source) + λ_T · CE(labelled target)`, each a batch mean. An
/// empty batch contributes nothing.
pub fn supervised_loss_and_grads(
    params: &NetworkParams,
    source: &Batch,
    target_labeled: &Batch,
    lw: &LossWeights,
) -> Result<(f64, Gradients)> {
    lw.validate()?;
    let mut grads = params.zeros_like();
    let ls = weighted_ce(params, source, lw.lambda_s, &mut grads)?;
    let lt = weighted_ce(params, target_labeled, lw.lambda_t, &mut grads)?;
    Ok((ls + lt, grads))
}

/// Mean predictive entropy of a batch and its gradient (not yet reversed).
pub fn mean_entropy_and_grads(params: &NetworkParams, inputs: &Matrix) -> Result<(f64, Gradients)> {
    params.check_input(inputs)?;
    if inputs.rows() == 0 {
        return Err(Error::InvalidArgument("empty unlabeled batch".into()));
    }
    let cache = forward_cached(params, inputs);
    let c = params.num_classes();
    let n = inputs.rows() as f64;
    let mut dz = Matrix::zeros(inputs.rows(), c);
    let mut logp = vec![0.0; c];
    let mut total = 0.0;
    for i in 0..inputs.rows() {
        log_softmax_row(cache.logits.row(i), &mut logp);
        let h: f64 = -logp.iter().map(|l| l.exp() * l).sum::<f64>();
        total += h;
        // ∂H/∂z_j = −p_j (log p_j + H)
        for (d, l) in dz.row_mut(i).iter_mut().zip(&logp) {
            *d = -l.exp() * (l + h) / n;
        }
    }
    let mut grads = params.zeros_like();
    backward(params, &cache, &dz, &mut grads);
    Ok((total / n, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmeLoss {
    /// Labelled cross-entropy term.
    pub tce: f64,
    /// Mean predictive entropy over the unlabeled target batch.
    pub target_entropy: f64,
}

/// Supervised gradients plus the target entropy gradient, reversed at the
/// extractor/classifier boundary: the classifier receives `−λ_H ∇H`, the
/// extractor `+λ_H ∇H`.
pub fn mme_loss_and_grads(
    params: &NetworkParams,
    source: &Batch,
    target_labeled: &Batch,
    target_unlabeled: &Matrix,
    lw: &LossWeights,
) -> Result<(MmeLoss, Gradients)> {
    let (tce, mut grads) = supervised_loss_and_grads(params, source, target_labeled, lw)?;
    let (h, gh) = mean_entropy_and_grads(params, target_unlabeled)?;
    let split = params.num_extractor_tensors();
    for (t, (dst, src)) in grads.tensors_mut().into_iter().zip(gh.tensors()).enumerate() {
        let scale = if t < split { lw.lambda_h } else { -lw.lambda_h };
        for (d, s) in dst.iter_mut().zip(src) {
            *d += scale * s;
        }
    }
    Ok((
        MmeLoss {
            tce,
            target_entropy: h,
        },
        grads,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerMethod {
    Sgd,
    Adam,
}

/// SGD or Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub method: OptimizerMethod,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(method: OptimizerMethod, learning_rate: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("weight decay must be >= 0".into()));
        }
        Ok(Self {
            method,
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over matching parameter/gradient tensors.
    pub fn step_tensors(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len()
            || params.iter().zip(grads).any(|(p, g)| p.len() != g.len())
        {
            return Err(Error::DimensionMismatch("parameter/gradient shapes differ".into()));
        }
        if self.method == OptimizerMethod::Adam && self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second_moment = self.first_moment.clone();
        }
        if self.method == OptimizerMethod::Adam
            && (self.first_moment.len() != params.len()
                || self.first_moment.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()))
        {
            return Err(Error::DimensionMismatch("optimizer state shape mismatch".into()));
        }
        self.step += 1;
        let lr = self.learning_rate;
        let decay = 1.0 - lr * self.weight_decay;
        match self.method {
            OptimizerMethod::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.iter_mut().zip(g.iter()) {
                        *pv = *pv * decay - lr * gv;
                    }
                }
            }
            OptimizerMethod::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first_moment)
                    .zip(&mut self.second_moment)
                {
                    for j in 0..p.len() {
                        let gv = g[j];
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gv;
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gv * gv;
                        let mhat = m[j] / c1;
                        let vhat = v[j] / c2;
                        p[j] = p[j] * decay - lr * mhat / (vhat.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Applies one optimizer update to every network parameter.
pub fn optimizer_step(
    params: &mut NetworkParams,
    grads: &Gradients,
    opt: &mut OptimizerState,
) -> Result<()> {
    let g = grads.tensors();
    let mut p = params.tensors_mut();
    opt.step_tensors(&mut p, &g)
}

/// Updates only the first `split` tensors (extractor) or only the remaining
/// ones (classifier); used to probe the two players separately.
pub fn sgd_partial_step(params: &mut NetworkParams, grads: &Gradients, lr: f64, classifier_only: bool) {
    let split = params.num_extractor_tensors();
    for (t, (p, g)) in params.tensors_mut().into_iter().zip(grads.tensors()).enumerate() {
        if (t >= split) == classifier_only {
            for (pv, gv) in p.iter_mut().zip(g) {
                *pv -= lr * gv;
            }
        }
    }
}

/// Predicted class per row (argmax of logits, ties to the lower class).
pub fn predict(params: &NetworkParams, inputs: &Matrix) -> Result<Vec<usize>> {
    let (_, logits) = forward(params, inputs)?;
    Ok(logits.row_iter().map(argmax).collect())
}

/// Fraction of rows whose predicted class matches the label.
pub fn evaluate_accuracy(params: &NetworkParams, inputs: &Matrix, labels: &[usize]) -> Result<f64> {
    if inputs.rows() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} inputs with {} labels",
            inputs.rows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set".into()));
    }
    let pred = predict(params, inputs)?;
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

// Checkpoint layout (little-endian):
//   magic "ADACLUE\0", u32 version,
//   u32 extractor layer count,
//   per layer: u8 activation, u32 outputs, u32 inputs, weights, bias,
//   classifier: u32 outputs, u32 inputs, weights, bias.
const CHECKPOINT_MAGIC: &[u8; 8] = b"ADACLUE\0";
const CHECKPOINT_VERSION: u32 = 1;

fn put_linear(out: &mut Vec<u8>, l: &Linear) {
    out.extend_from_slice(&(l.outputs() as u32).to_le_bytes());
    out.extend_from_slice(&(l.inputs() as u32).to_le_bytes());
    for v in l.weight.as_slice().iter().chain(&l.bias) {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn linear(&mut self) -> Result<Linear> {
        let out = self.u32()? as usize;
        let inp = self.u32()? as usize;
        let w = self.f64s(out * inp)?;
        let b = self.f64s(out)?;
        Linear::new(Matrix::new(out, inp, w)?, b)
    }
}

impl NetworkParams {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.extractor.len() as u32).to_le_bytes());
        for l in &self.extractor {
            out.push(l.activation.code());
            put_linear(&mut out, &l.linear);
        }
        put_linear(&mut out, &self.classifier);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a network checkpoint (bad magic)".into()));
        }
        let version = c.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let layers = c.u32()? as usize;
        let mut extractor = Vec::with_capacity(layers.min(1024));
        for _ in 0..layers {
            let activation = Activation::from_code(c.take(1)?[0])?;
            extractor.push(ExtractorLayer {
                linear: c.linear()?,
                activation,
            });
        }
        let classifier = c.linear()?;
        if c.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Self::new(extractor, classifier)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::softmax_rows;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(seed: u64, act: Activation) -> NetworkParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NetworkParams::init(3, &[5, 4], act, 3, &mut rng).unwrap()
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn zero_network_gives_uniform_posteriors() {
        let p = net(0, Activation::Tanh).zeros_like();
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]]).unwrap();
        let (_, logits) = forward(&p, &x).unwrap();
        assert!(logits.as_slice().iter().all(|&v| v == 0.0));
        let probs = softmax_rows(&logits, 1.0).unwrap();
        assert!(probs.as_slice().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn identity_network_passes_inputs_through() {
        let eye = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let p = NetworkParams::new(
            vec![ExtractorLayer {
                linear: Linear::new(eye.clone(), vec![0.0; 2]).unwrap(),
                activation: Activation::Identity,
            }],
            Linear::new(eye, vec![0.0; 2]).unwrap(),
        )
        .unwrap();
        let x = Matrix::from_rows(&[[0.3, -2.0], [5.0, 1.0]]).unwrap();
        let (emb, logits) = forward(&p, &x).unwrap();
        assert_eq!(emb, x);
        assert_eq!(logits, x);
    }

    #[test]
    fn forward_matches_scalar_loop() {
        let p = net(4, Activation::Tanh);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_matrix(6, 3, &mut rng);
        let (_, logits) = forward(&p, &x).unwrap();
        for i in 0..6 {
            let mut h: Vec<f64> = x.row(i).to_vec();
            for l in &p.extractor {
                let mut next = Vec::new();
                for o in 0..l.linear.outputs() {
                    let mut a = l.linear.bias[o];
                    for j in 0..h.len() {
                        a += l.linear.weight.get(o, j) * h[j];
                    }
                    next.push(a.tanh());
                }
                h = next;
            }
            for c in 0..3 {
                let mut z = p.classifier.bias[c];
                for j in 0..h.len() {
                    z += p.classifier.weight.get(c, j) * h[j];
                }
                assert!((z - logits.get(i, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        assert!(forward(&net(0, Activation::Relu), &Matrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn mismatched_layers_rejected() {
        let r = NetworkParams::new(
            vec![ExtractorLayer {
                linear: Linear::zeros(4, 2),
                activation: Activation::Relu,
            }],
            Linear::zeros(3, 5),
        );
        assert!(r.is_err());
    }

    #[test]
    fn uniform_logits_give_log_c_loss() {
        let p = net(1, Activation::Tanh).zeros_like();
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0], [0.0, 0.0, 1.0]]).unwrap();
        let src = Batch::new(x.clone(), vec![0, 2]).unwrap();
        let tgt = Batch::new(x, vec![1, 1]).unwrap();
        let lw = LossWeights::default();
        let (loss, _) = supervised_loss_and_grads(&p, &src, &tgt, &lw).unwrap();
        assert!((loss - (lw.lambda_s + lw.lambda_t) * 3f64.ln()).abs() < 1e-12);

        let (loss, _) = supervised_loss_and_grads(&p, &src, &Batch::empty(3), &lw).unwrap();
        assert!((loss - lw.lambda_s * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_drive_loss_to_zero() {
        let mut prev = f64::INFINITY;
        for scale in [1.0, 10.0, 100.0] {
            let w = Matrix::from_rows(&[[scale, 0.0], [0.0, scale]]).unwrap();
            let p = NetworkParams::new(vec![], Linear::new(w, vec![0.0; 2]).unwrap()).unwrap();
            let b = Batch::new(Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap(), vec![0, 1]).unwrap();
            let (loss, _) = supervised_loss_and_grads(&p, &b, &b, &LossWeights::default()).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-40);
    }

    #[test]
    fn label_out_of_range() {
        let p = net(0, Activation::Tanh);
        let b = Batch::new(Matrix::zeros(1, 3), vec![3]).unwrap();
        assert!(matches!(
            supervised_loss_and_grads(&p, &b, &Batch::empty(3), &LossWeights::default()),
            Err(Error::LabelOutOfRange { label: 3, num_classes: 3 })
        ));
    }

    #[test]
    fn mme_without_entropy_weight_reduces_to_supervised() {
        let p = net(2, Activation::Tanh);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src = Batch::new(random_matrix(4, 3, &mut rng), vec![0, 1, 2, 0]).unwrap();
        let tl = Batch::new(random_matrix(2, 3, &mut rng), vec![2, 1]).unwrap();
        let tu = random_matrix(5, 3, &mut rng);
        let lw = LossWeights {
            lambda_h: 0.0,
            ..LossWeights::default()
        };
        let (_, g1) = supervised_loss_and_grads(&p, &src, &tl, &lw).unwrap();
        let (_, g2) = mme_loss_and_grads(&p, &src, &tl, &tu, &lw).unwrap();
        assert_eq!(g1, g2);
        assert!(mme_loss_and_grads(&p, &src, &tl, &Matrix::zeros(0, 3), &lw).is_err());
    }

    #[test]
    fn optimizer_examples() {
        let mut p = net(0, Activation::Tanh);
        let before = p.clone();
        let zero = p.zeros_like();
        let mut adam = OptimizerState::new(OptimizerMethod::Adam, 0.1, 0.0).unwrap();
        optimizer_step(&mut p, &zero, &mut adam).unwrap();
        assert_eq!(p, before);

        let mut x = [3.0];
        let mut sgd = OptimizerState::new(OptimizerMethod::Sgd, 1.0, 0.0).unwrap();
        sgd.step_tensors(&mut [&mut x[..]], &[&[0.25][..]]).unwrap();
        assert_eq!(x[0], 2.75);

        let mut x = [5.0];
        let mut adam = OptimizerState::new(OptimizerMethod::Adam, 1e-2, 0.0).unwrap();
        for _ in 0..2000 {
            let g = [2.0 * x[0]];
            adam.step_tensors(&mut [&mut x[..]], &[&g[..]]).unwrap();
        }
        assert!(x[0].abs() < 1e-2, "x = {}", x[0]);

        assert!(OptimizerState::new(OptimizerMethod::Sgd, 0.0, 0.0).is_err());
        let mut sgd = OptimizerState::new(OptimizerMethod::Sgd, 1.0, 0.0).unwrap();
        assert!(sgd.step_tensors(&mut [&mut [0.0, 1.0][..]], &[&[1.0][..]]).is_err());
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut x = [2.0];
        let mut sgd = OptimizerState::new(OptimizerMethod::Sgd, 0.5, 0.1).unwrap();
        sgd.step_tensors(&mut [&mut x[..]], &[&[0.0][..]]).unwrap();
        assert!((x[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn accuracy_examples() {
        let p = net(7, Activation::Tanh);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_matrix(20, 3, &mut rng);
        let pred = predict(&p, &x).unwrap();
        assert_eq!(evaluate_accuracy(&p, &x, &pred).unwrap(), 1.0);
        let wrong: Vec<usize> = pred.iter().map(|y| (y + 1) % 3).collect();
        assert_eq!(evaluate_accuracy(&p, &x, &wrong).unwrap(), 0.0);
        assert!(evaluate_accuracy(&p, &x, &pred[..3]).is_err());
    }

    #[test]
    fn zero_network_accuracy_on_balanced_binary_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = NetworkParams::init(2, &[4], Activation::Tanh, 2, &mut rng)
            .unwrap()
            .zeros_like();
        let n = 10_000;
        let x = random_matrix(n, 2, &mut rng);
        let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        rand::seq::SliceRandom::shuffle(&mut labels[..], &mut rng);
        // ties resolve to class 0, so accuracy is the share of zeros
        let acc = evaluate_accuracy(&params, &x, &labels).unwrap();
        let sigma = (0.25 / n as f64).sqrt();
        assert!((acc - 0.5).abs() < 3.0 * sigma, "acc {acc}");
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let p = net(12, Activation::Relu);
        let bytes = p.to_bytes();
        let q = NetworkParams::from_bytes(&bytes).unwrap();
        assert_eq!(q.to_bytes(), bytes);
        assert_eq!(p, q);

        assert!(NetworkParams::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(NetworkParams::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(NetworkParams::from_bytes(&long).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        p.save(&path).unwrap();
        assert_eq!(NetworkParams::load(&path).unwrap(), p);
    }
}
