//! The active adaptation loop: source training, an optional unsupervised
//! minimax-entropy phase, then rounds of select, label and adapt.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PoolState, Split};
use crate::error::{Error, Result};
use crate::model::{
    evaluate_accuracy, forward, mme_loss_and_grads, optimizer_step, supervised_loss_and_grads,
    Activation, Batch, LossWeights, NetworkParams, OptimizerMethod, OptimizerState,
};
use crate::numerics::{softmax_rows, Matrix};
use crate::sampling::{select, AcquisitionRequest, StrategyConfig};
use crate::uncertainty::entropy_rows;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainingMode {
    /// Cross-entropy on the labelled target set only.
    Finetune,
    /// Source and labelled-target cross-entropy plus the minimax entropy
    /// game over all target-train data, preceded by an unsupervised phase.
    Mme,
}

impl TrainingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainingMode::Finetune => "finetune",
            TrainingMode::Mme => "mme",
        }
    }
}

impl std::str::FromStr for TrainingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune" => Ok(TrainingMode::Finetune),
            "mme" => Ok(TrainingMode::Mme),
            _ => Err(Error::InvalidArgument(format!(
                "unknown mode `{s}` (expected finetune or mme)"
            ))),
        }
    }
}

/// Optimizer and schedule of one training phase. In the round phase an
/// epoch is one pass over the labelled target set; in the source phase a
/// pass over the source set; in the unsupervised phase a pass over
/// target-train.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerMethod,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl PhaseConfig {
    fn validate(&self, name: &str) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument(format!("{name}: batch_size must be >= 1")));
        }
        OptimizerState::new(self.optimizer, self.learning_rate, self.weight_decay)
            .map(|_| ())
            .map_err(|e| Error::InvalidArgument(format!("{name}: {e}")))
    }

    fn optimizer(&self) -> Result<OptimizerState> {
        OptimizerState::new(self.optimizer, self.learning_rate, self.weight_decay)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub rounds: usize,
    pub budget: usize,
    pub strategy: StrategyConfig,
    pub loss: LossWeights,
    pub mode: TrainingMode,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub source_training: PhaseConfig,
    pub unsupervised_adaptation: PhaseConfig,
    pub round_training: PhaseConfig,
    /// Target-train rows per step in the entropy term.
    pub unlabeled_batch_size: usize,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            budget: 20,
            strategy: StrategyConfig::default(),
            loss: LossWeights::default(),
            mode: TrainingMode::Mme,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            source_training: PhaseConfig {
                epochs: 20,
                batch_size: 64,
                optimizer: OptimizerMethod::Adam,
                learning_rate: 3e-3,
                weight_decay: 1e-5,
            },
            unsupervised_adaptation: PhaseConfig {
                epochs: 5,
                batch_size: 64,
                optimizer: OptimizerMethod::Adam,
                learning_rate: 1e-3,
                weight_decay: 1e-5,
            },
            round_training: PhaseConfig {
                epochs: 20,
                batch_size: 32,
                optimizer: OptimizerMethod::Adam,
                learning_rate: 1e-3,
                weight_decay: 1e-5,
            },
            unlabeled_batch_size: 64,
            seeds: vec![0, 1, 2],
        }
    }
}

impl ExperimentConfig {
    /// Checks the config on its own.
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::InvalidArgument("rounds must be >= 1".into()));
        }
        if self.budget == 0 {
            return Err(Error::InvalidArgument("budget must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("seeds must be non-empty".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument(
                "hidden layer widths must be non-empty and positive".into(),
            ));
        }
        if self.unlabeled_batch_size == 0 {
            return Err(Error::InvalidArgument("unlabeled_batch_size must be >= 1".into()));
        }
        self.strategy.validate()?;
        self.loss.validate()?;
        self.source_training.validate("source_training")?;
        self.unsupervised_adaptation.validate("unsupervised_adaptation")?;
        self.round_training.validate("round_training")?;
        Ok(())
    }

    /// Checks the config against the data it will run on.
    pub fn validate_for(&self, data: &ExperimentData) -> Result<()> {
        self.validate()?;
        data.validate()?;
        let pool = data.target.indices_of(Split::TargetTrain).len();
        let total = self
            .rounds
            .checked_mul(self.budget)
            .ok_or_else(|| Error::InvalidArgument("rounds x budget overflows".into()))?;
        if total > pool {
            return Err(Error::InvalidArgument(format!(
                "rounds x budget = {total} exceeds the target-train pool of {pool}"
            )));
        }
        Ok(())
    }
}

/// Source data (all `source_train`) and target data split into
/// `target_train` and `target_test`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentData {
    pub source: Dataset,
    pub target: Dataset,
}

impl ExperimentData {
    pub fn new(source: Dataset, target: Dataset) -> Result<Self> {
        let d = Self { source, target };
        d.validate()?;
        Ok(d)
    }

    fn validate(&self) -> Result<()> {
        if self.source.dim() != self.target.dim() {
            return Err(Error::DimensionMismatch(format!(
                "source has {} features, target {}",
                self.source.dim(),
                self.target.dim()
            )));
        }
        if self.source.num_classes() != self.target.num_classes() {
            return Err(Error::DimensionMismatch(format!(
                "source has {} classes, target {}",
                self.source.num_classes(),
                self.target.num_classes()
            )));
        }
        if self.source.splits().iter().any(|&s| s != Split::SourceTrain) {
            return Err(Error::InvalidArgument("source rows must be tagged source_train".into()));
        }
        if self.target.splits().contains(&Split::SourceTrain) {
            return Err(Error::InvalidArgument("target rows must not be tagged source_train".into()));
        }
        if self.source.is_empty() {
            return Err(Error::InvalidArgument("empty source set".into()));
        }
        if self.target.indices_of(Split::TargetTrain).is_empty()
            || self.target.indices_of(Split::TargetTest).is_empty()
        {
            return Err(Error::InvalidArgument(
                "target needs both target_train and target_test rows".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of one round (round 0 is the state before any target labels).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Target indices acquired this round, in selection order.
    pub selected: Vec<usize>,
    pub cumulative_labels: usize,
    /// Accuracy on target-test after this round's update.
    pub accuracy: f64,
    /// Mean predictive entropy over target-train after the update.
    pub mean_entropy: f64,
    /// Normalized and unnormalized clustering objectives of the clustering
    /// strategy; absent for the others.
    pub cluster_objective: Option<f64>,
    pub cluster_surrogate: Option<f64>,
    pub wall_ms: u64,
}

impl RoundRecord {
    /// The record with its timing zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> RoundRecord {
        RoundRecord {
            wall_ms: 0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub seed: u64,
    pub records: Vec<RoundRecord>,
    pub final_params: NetworkParams,
}

impl RunTrace {
    pub fn final_accuracy(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.accuracy)
    }
}

// Independent random streams per purpose, so that e.g. the strategy
// consuming randomness never shifts the training batches.
const STREAM_INIT: u64 = 1;
const STREAM_SOURCE: u64 = 2;
const STREAM_UNSUP: u64 = 3;
const STREAM_ROUND: u64 = 4;
const STREAM_SELECT: u64 = 5;

fn stream_rng(seed: u64, stream: u64, round: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add((round as u64) << 32));
    rng.set_stream(stream);
    rng
}

fn stream_seed(seed: u64, stream: u64, round: usize) -> u64 {
    rand::RngCore::next_u64(&mut stream_rng(seed, stream, round))
}

/// Endless shuffled passes over a set of indices.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(indices: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        let mut c = Self {
            order: indices,
            pos: 0,
        };
        c.order.shuffle(rng);
        c
    }

    fn next_batch(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Errors if any index names a target-test row.
fn leakage_guard(target: &Dataset, indices: &[usize]) -> Result<()> {
    match indices
        .iter()
        .find(|&&i| target.splits().get(i) != Some(&Split::TargetTrain))
    {
        Some(&i) if target.splits().get(i) == Some(&Split::TargetTest) => Err(Error::Leakage(i)),
        Some(&i) => Err(Error::Pool(format!("index {i} is not a target-train row"))),
        None => Ok(()),
    }
}

fn labeled_batch(data: &Dataset, indices: &[usize]) -> Result<Batch> {
    Batch::new(
        data.features().select_rows(indices),
        indices.iter().map(|&i| data.labels()[i]).collect(),
    )
}

/// One seed's run, advanced a round at a time.
pub struct SeedRun<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a ExperimentData,
    seed: u64,
    round: usize,
    params: NetworkParams,
    pool: PoolState,
    target_train: Vec<usize>,
    test: Vec<usize>,
}

impl<'a> SeedRun<'a> {
    /// Trains on source, runs the unsupervised phase in mme mode, and
    /// returns the run with its round-0 record.
    pub fn start(
        cfg: &'a ExperimentConfig,
        data: &'a ExperimentData,
        seed: u64,
    ) -> Result<(Self, RoundRecord)> {
        cfg.validate_for(data)?;
        let started = Instant::now();
        let params = NetworkParams::init(
            data.source.dim(),
            &cfg.hidden,
            cfg.activation,
            data.source.num_classes(),
            &mut stream_rng(seed, STREAM_INIT, 0),
        )?;
        let mut run = Self::with_params(cfg, data, seed, 0, params, &[])?;
        run.train_source()?;
        if cfg.mode == TrainingMode::Mme {
            run.adapt_unsupervised()?;
        }
        let record = run.record(Vec::new(), None, None, started)?;
        Ok((run, record))
    }

    /// Rebuilds a run at `round` from saved parameters and the labelled
    /// indices acquired so far (in acquisition order).
    pub fn resume(
        cfg: &'a ExperimentConfig,
        data: &'a ExperimentData,
        seed: u64,
        round: usize,
        params: NetworkParams,
        labeled: &[usize],
    ) -> Result<Self> {
        cfg.validate_for(data)?;
        if labeled.len() != round * cfg.budget {
            return Err(Error::Pool(format!(
                "round {round} needs {} labels, got {}",
                round * cfg.budget,
                labeled.len()
            )));
        }
        Self::with_params(cfg, data, seed, round, params, labeled)
    }

    fn with_params(
        cfg: &'a ExperimentConfig,
        data: &'a ExperimentData,
        seed: u64,
        round: usize,
        params: NetworkParams,
        labeled: &[usize],
    ) -> Result<Self> {
        if params.input_dim() != data.target.dim()
            || params.num_classes() != data.target.num_classes()
        {
            return Err(Error::DimensionMismatch("parameters do not fit the data".into()));
        }
        let mut pool = PoolState::new(&data.target, Some(cfg.rounds * cfg.budget));
        if !labeled.is_empty() {
            pool.oracle_label(&data.target, labeled)?;
        }
        Ok(Self {
            cfg,
            data,
            seed,
            round,
            params,
            pool,
            target_train: data.target.indices_of(Split::TargetTrain),
            test: data.target.indices_of(Split::TargetTest),
        })
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn pool(&self) -> &PoolState {
        &self.pool
    }

    pub fn is_finished(&self) -> bool {
        self.round >= self.cfg.rounds
    }

    fn train_source(&mut self) -> Result<()> {
        let phase = &self.cfg.source_training;
        let mut rng = stream_rng(self.seed, STREAM_SOURCE, 0);
        let mut opt = phase.optimizer()?;
        // Only the source term is present, at unit weight.
        let lw = LossWeights {
            lambda_s: 1.0,
            lambda_t: 0.0,
            lambda_h: 0.0,
        };
        let empty = Batch::empty(self.data.source.dim());
        let mut order: Vec<usize> = (0..self.data.source.len()).collect();
        for _ in 0..phase.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(phase.batch_size) {
                let batch = labeled_batch(&self.data.source, chunk)?;
                let (_, g) = supervised_loss_and_grads(&self.params, &batch, &empty, &lw)?;
                optimizer_step(&mut self.params, &g, &mut opt)?;
            }
        }
        self.check_finite("source training")
    }

    fn adapt_unsupervised(&mut self) -> Result<()> {
        let phase = &self.cfg.unsupervised_adaptation;
        let mut rng = stream_rng(self.seed, STREAM_UNSUP, 0);
        let mut opt = phase.optimizer()?;
        let mut source = Cycler::new((0..self.data.source.len()).collect(), &mut rng);
        let mut order = self.target_train.clone();
        let empty = Batch::empty(self.data.target.dim());
        for _ in 0..phase.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(self.cfg.unlabeled_batch_size) {
                leakage_guard(&self.data.target, chunk)?;
                let src = labeled_batch(&self.data.source, &source.next_batch(phase.batch_size, &mut rng))?;
                let tu = self.data.target.features().select_rows(chunk);
                let (_, g) = mme_loss_and_grads(&self.params, &src, &empty, &tu, &self.cfg.loss)?;
                optimizer_step(&mut self.params, &g, &mut opt)?;
            }
        }
        self.check_finite("unsupervised adaptation")
    }

    fn train_round(&mut self) -> Result<()> {
        let phase = &self.cfg.round_training;
        let mut rng = stream_rng(self.seed, STREAM_ROUND, self.round);
        let mut opt = phase.optimizer()?;
        let mut order = self.pool.labeled().to_vec();
        leakage_guard(&self.data.target, &order)?;
        let dim = self.data.target.dim();
        let mut source = Cycler::new((0..self.data.source.len()).collect(), &mut rng);
        let mut unlabeled = Cycler::new(self.target_train.clone(), &mut rng);
        for _ in 0..phase.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(phase.batch_size) {
                let tl = labeled_batch(&self.data.target, chunk)?;
                let g = match self.cfg.mode {
                    TrainingMode::Finetune => {
                        let lw = LossWeights {
                            lambda_s: 0.0,
                            ..self.cfg.loss
                        };
                        supervised_loss_and_grads(&self.params, &Batch::empty(dim), &tl, &lw)?.1
                    }
                    TrainingMode::Mme => {
                        let src = labeled_batch(
                            &self.data.source,
                            &source.next_batch(phase.batch_size, &mut rng),
                        )?;
                        let tu_idx = unlabeled.next_batch(self.cfg.unlabeled_batch_size, &mut rng);
                        leakage_guard(&self.data.target, &tu_idx)?;
                        let tu = self.data.target.features().select_rows(&tu_idx);
                        mme_loss_and_grads(&self.params, &src, &tl, &tu, &self.cfg.loss)?.1
                    }
                };
                optimizer_step(&mut self.params, &g, &mut opt)?;
            }
        }
        self.check_finite("round training")
    }

    fn check_finite(&self, phase: &str) -> Result<()> {
        if self.params.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "parameters diverged during {phase}"
            )))
        }
    }

    fn record(
        &self,
        selected: Vec<usize>,
        cluster_objective: Option<f64>,
        cluster_surrogate: Option<f64>,
        started: Instant,
    ) -> Result<RoundRecord> {
        let t = &self.data.target;
        let test_labels: Vec<usize> = self.test.iter().map(|&i| t.labels()[i]).collect();
        let accuracy =
            evaluate_accuracy(&self.params, &t.features().select_rows(&self.test), &test_labels)?;
        let (_, logits) = forward(&self.params, &t.features().select_rows(&self.target_train))?;
        let h = entropy_rows(&softmax_rows(&logits, 1.0)?)?;
        let mean_entropy = h.iter().sum::<f64>() / h.len() as f64;
        Ok(RoundRecord {
            round: self.round,
            selected,
            cumulative_labels: self.pool.labeled().len(),
            accuracy,
            mean_entropy,
            cluster_objective,
            cluster_surrogate,
            wall_ms: started.elapsed().as_millis() as u64,
        })
    }

    /// Selects `budget` target-train rows, reveals their labels and adapts.
    pub fn step(&mut self) -> Result<RoundRecord> {
        if self.is_finished() {
            return Err(Error::InvalidArgument("all rounds already run".into()));
        }
        let started = Instant::now();
        let unlabeled = self.pool.unlabeled().to_vec();
        leakage_guard(&self.data.target, &unlabeled)?;
        let t = &self.data.target;
        let (embeddings, logits) = forward(&self.params, &t.features().select_rows(&unlabeled))?;
        let probs = softmax_rows(&logits, self.cfg.strategy.temperature)?;
        let labeled_embeddings = if self.pool.labeled().is_empty() {
            Matrix::zeros(0, embeddings.cols())
        } else {
            forward(&self.params, &t.features().select_rows(self.pool.labeled()))?.0
        };
        let req = AcquisitionRequest {
            budget: self.cfg.budget,
            embeddings: &embeddings,
            probs: &probs,
            logits: &logits,
            unlabeled_indices: &unlabeled,
            rng_seed: stream_seed(self.seed, STREAM_SELECT, self.round + 1),
        };
        let sel = select(&req, &self.cfg.strategy, &labeled_embeddings)?;
        leakage_guard(t, &sel.indices)?;
        self.pool.oracle_label(t, &sel.indices)?;
        self.pool.check_partition()?;
        self.round += 1;
        self.train_round()?;
        self.record(sel.indices, sel.cluster_objective, sel.cluster_surrogate, started)
    }
}

/// Runs every round for one seed.
pub fn run_seed(cfg: &ExperimentConfig, data: &ExperimentData, seed: u64) -> Result<RunTrace> {
    let (mut run, first) = SeedRun::start(cfg, data, seed)?;
    let mut records = vec![first];
    while !run.is_finished() {
        let rec = run.step()?;
        debug_assert_eq!(rec.cumulative_labels, rec.round * cfg.budget);
        records.push(rec);
    }
    Ok(RunTrace {
        seed,
        records,
        final_params: run.params,
    })
}

/// Runs all configured seeds, in parallel on the current rayon pool. A
/// failing seed yields an error in its own slot only.
pub fn run_experiment(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<Vec<Result<RunTrace>>> {
    cfg.validate_for(data)?;
    Ok(cfg
        .seeds
        .par_iter()
        .map(|&seed| run_seed(cfg, data, seed))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub labels: usize,
    pub acc_mean: f64,
    /// Sample standard deviation (n − 1 denominator); 0 for one trace.
    pub acc_std: f64,
}

/// Per-round mean and sample standard deviation of accuracy across traces.
pub fn aggregate(traces: &[RunTrace]) -> Result<Vec<RoundSummary>> {
    let first = traces
        .first()
        .ok_or_else(|| Error::InvalidArgument("no traces to aggregate".into()))?;
    let rounds = first.records.len();
    if traces.iter().any(|t| t.records.len() != rounds) {
        return Err(Error::DimensionMismatch("traces differ in length".into()));
    }
    let n = traces.len() as f64;
    (0..rounds)
        .map(|r| {
            let rec = &first.records[r];
            if traces.iter().any(|t| t.records[r].round != rec.round) {
                return Err(Error::DimensionMismatch("traces disagree on round numbering".into()));
            }
            let mean = traces.iter().map(|t| t.records[r].accuracy).sum::<f64>() / n;
            let std = if traces.len() > 1 {
                let ss: f64 = traces
                    .iter()
                    .map(|t| (t.records[r].accuracy - mean).powi(2))
                    .sum();
                (ss / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            Ok(RoundSummary {
                round: rec.round,
                labels: rec.cumulative_labels,
                acc_mean: mean,
                acc_std: std,
            })
        })
        .collect()
}
