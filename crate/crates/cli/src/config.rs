//! The TOML experiment file: one table per concern, every key optional.

use std::path::{Path, PathBuf};

use ada_clue::data::{generate_shift, load_idx, Dataset, Generator, ShiftSpec, Split};
use ada_clue::driver::{ExperimentConfig, ExperimentData, PhaseConfig, TrainingMode};
use ada_clue::model::{Activation, LossWeights, OptimizerMethod};
use ada_clue::sampling::{StrategyConfig, StrategyName};
use ada_clue::uncertainty::WeightKind;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub experiment: ExperimentSection,
    pub strategy: StrategySection,
    pub model: ModelSection,
    pub optimizer: OptimizerSection,
    pub data: DataSection,
}

impl Default for FileConfig {
    fn default() -> Self {
        let exp = ExperimentConfig::default();
        Self {
            experiment: ExperimentSection {
                rounds: exp.rounds,
                budget: exp.budget,
                mode: exp.mode,
                seeds: exp.seeds.clone(),
            },
            strategy: StrategySection::default(),
            model: ModelSection {
                hidden: exp.hidden.clone(),
                activation: exp.activation,
                lambda_s: exp.loss.lambda_s,
                lambda_t: exp.loss.lambda_t,
                lambda_h: exp.loss.lambda_h,
                unlabeled_batch_size: exp.unlabeled_batch_size,
            },
            optimizer: OptimizerSection::default(),
            data: DataSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub rounds: usize,
    pub budget: usize,
    pub mode: TrainingMode,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        FileConfig::default().experiment
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategySection {
    pub name: StrategyName,
    pub temperature: f64,
    pub clue_weight_kind: WeightKind,
    pub aada_top_fraction: f64,
}

impl Default for StrategySection {
    fn default() -> Self {
        let s = StrategyConfig::default();
        Self {
            name: s.name,
            temperature: s.temperature,
            clue_weight_kind: s.clue_weight_kind,
            aada_top_fraction: s.aada_top_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub lambda_s: f64,
    pub lambda_t: f64,
    pub lambda_h: f64,
    pub unlabeled_batch_size: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        FileConfig::default().model
    }
}

/// A phase table; unset keys fall back to that phase's own defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<OptimizerMethod>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
}

impl PhaseSection {
    fn resolve(&self, base: &PhaseConfig) -> PhaseConfig {
        PhaseConfig {
            epochs: self.epochs.unwrap_or(base.epochs),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            optimizer: self.method.unwrap_or(base.optimizer),
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            weight_decay: self.weight_decay.unwrap_or(base.weight_decay),
        }
    }

    fn filled(base: &PhaseConfig) -> Self {
        Self {
            epochs: Some(base.epochs),
            batch_size: Some(base.batch_size),
            method: Some(base.optimizer),
            learning_rate: Some(base.learning_rate),
            weight_decay: Some(base.weight_decay),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub source: PhaseSection,
    pub unsupervised: PhaseSection,
    pub round: PhaseSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Synthetic,
    Idx,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub kind: DataKind,
    /// Fraction of target rows held out as `target_test` (idx data; the
    /// synthetic generator uses it too).
    pub test_fraction: f64,
    pub seed: u64,

    // synthetic
    pub generator: Generator,
    pub num_classes: usize,
    pub source_count: usize,
    pub target_count: usize,
    pub rotation_deg: f64,
    pub translation: [f64; 2],
    pub class_mean_shift: f64,
    pub noise_scale: f64,
    pub class_radius: f64,
    pub class_std: f64,

    // idx; relative paths are resolved against the config file
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_labels: Option<PathBuf>,

    // csv, as written by `Dataset::write_csv`
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_csv: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_csv: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = ShiftSpec::default();
        Self {
            kind: DataKind::Synthetic,
            test_fraction: s.target_test_fraction,
            seed: s.seed,
            generator: s.generator,
            num_classes: s.num_classes,
            source_count: s.source_count,
            target_count: s.target_count,
            rotation_deg: 60.0,
            translation: s.translation,
            class_mean_shift: s.class_mean_shift,
            noise_scale: s.noise_scale,
            class_radius: s.class_radius,
            class_std: s.class_std,
            source_images: None,
            source_labels: None,
            target_images: None,
            target_labels: None,
            source_csv: None,
            target_csv: None,
        }
    }
}

/// A parsed config plus the directory its relative paths are resolved in.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub file: FileConfig,
    pub base_dir: PathBuf,
}

fn config_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{}: {}", path.display(), e.to_string().trim()))
}

/// One-line form of a TOML error: its message plus the line it points at.
fn toml_err(path: &Path, text: Option<&str>, e: &toml::de::Error) -> CliError {
    let line = text
        .zip(e.span())
        .map(|(t, span)| format!(" (line {})", t[..span.start].matches('\n').count() + 1))
        .unwrap_or_default();
    let msg = e.message().split_whitespace().collect::<Vec<_>>().join(" ");
    CliError::Config(format!("{}: {msg}{line}", path.display()))
}

/// Reads the raw TOML document. A missing config file is a config error.
pub fn read_document(path: &Path) -> Result<toml::Table, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err(path, e))?;
    text.parse::<toml::Table>()
        .map_err(|e| toml_err(path, Some(&text), &e))
}

pub fn from_document(doc: toml::Table, path: &Path) -> Result<LoadedConfig, CliError> {
    let file: FileConfig = toml::Value::Table(doc)
        .try_into()
        .map_err(|e| toml_err(path, None, &e))?;
    let base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok(LoadedConfig { file, base_dir })
}

pub fn load(path: &Path) -> Result<LoadedConfig, CliError> {
    from_document(read_document(path)?, path)
}

/// Sets `section.key` (any depth) in a TOML document to a literal parsed as
/// a TOML value, falling back to a plain string.
pub fn set_key(doc: &mut toml::Table, key: &str, literal: &str) -> Result<(), CliError> {
    let value = format!("v = {literal}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(literal.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| CliError::Config(format!("bad grid key `{key}`")))?;
    let mut table = doc;
    for p in parts {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("grid key `{key}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl FileConfig {
    pub fn experiment_config(&self) -> ExperimentConfig {
        let base = ExperimentConfig::default();
        ExperimentConfig {
            rounds: self.experiment.rounds,
            budget: self.experiment.budget,
            strategy: StrategyConfig {
                name: self.strategy.name,
                temperature: self.strategy.temperature,
                clue_weight_kind: self.strategy.clue_weight_kind,
                aada_top_fraction: self.strategy.aada_top_fraction,
            },
            loss: LossWeights {
                lambda_s: self.model.lambda_s,
                lambda_t: self.model.lambda_t,
                lambda_h: self.model.lambda_h,
            },
            mode: self.experiment.mode,
            hidden: self.model.hidden.clone(),
            activation: self.model.activation,
            source_training: self.optimizer.source.resolve(&base.source_training),
            unsupervised_adaptation: self
                .optimizer
                .unsupervised
                .resolve(&base.unsupervised_adaptation),
            round_training: self.optimizer.round.resolve(&base.round_training),
            unlabeled_batch_size: self.model.unlabeled_batch_size,
            seeds: self.experiment.seeds.clone(),
        }
    }

    /// The same config with every optional key spelled out.
    pub fn normalized(&self) -> FileConfig {
        let exp = self.experiment_config();
        let mut out = self.clone();
        out.optimizer = OptimizerSection {
            source: PhaseSection::filled(&exp.source_training),
            unsupervised: PhaseSection::filled(&exp.unsupervised_adaptation),
            round: PhaseSection::filled(&exp.round_training),
        };
        out
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(&self.normalized()).expect("config serializes")
    }

    /// SHA-256 over the normalized config with sorted keys, so key order
    /// and omitted defaults do not change it.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self.normalized()).expect("config serializes");
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn shift_spec(&self) -> ShiftSpec {
        let d = &self.data;
        ShiftSpec {
            generator: d.generator,
            num_classes: d.num_classes,
            source_count: d.source_count,
            target_count: d.target_count,
            target_test_fraction: d.test_fraction,
            rotation: d.rotation_deg.to_radians(),
            translation: d.translation,
            class_mean_shift: d.class_mean_shift,
            noise_scale: d.noise_scale,
            class_radius: d.class_radius,
            class_std: d.class_std,
            seed: d.seed,
        }
    }
}

fn data_err(e: ada_clue::Error) -> CliError {
    CliError::Data(e.to_string())
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf, CliError> {
    p.as_ref()
        .ok_or_else(|| CliError::Config(format!("data.{key} is required for this data kind")))
}

impl LoadedConfig {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Builds or loads the source/target pair the config describes.
    pub fn load_data(&self) -> Result<ExperimentData, CliError> {
        let d = &self.file.data;
        let (source, target) = match d.kind {
            DataKind::Synthetic => generate_shift(&self.file.shift_spec())
                .map_err(|e| CliError::Config(format!("data: {e}")))?,
            DataKind::Idx => {
                let si = self.resolve(required(&d.source_images, "source_images")?);
                let sl = self.resolve(required(&d.source_labels, "source_labels")?);
                let ti = self.resolve(required(&d.target_images, "target_images")?);
                let tl = self.resolve(required(&d.target_labels, "target_labels")?);
                let source = load_idx(&si, &sl).map_err(data_err)?;
                let target = load_idx(&ti, &tl)
                    .map_err(data_err)?
                    .split_target(d.test_fraction, d.seed)
                    .map_err(|e| CliError::Config(format!("data: {e}")))?;
                (source, target)
            }
            DataKind::Csv => {
                let read = |p: &Path| -> Result<Dataset, CliError> {
                    let f = std::fs::File::open(p)
                        .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
                    Dataset::read_csv(f).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
                };
                let source = read(&self.resolve(required(&d.source_csv, "source_csv")?))?;
                let target = read(&self.resolve(required(&d.target_csv, "target_csv")?))?;
                (source.with_split(Split::SourceTrain), target)
            }
        };
        let c = source.num_classes().max(target.num_classes());
        let source = source.with_num_classes(c).map_err(data_err)?;
        let target = target.with_num_classes(c).map_err(data_err)?;
        ExperimentData::new(source, target).map_err(data_err)
    }
}

/// Config-level checks, then checks against the loaded data.
pub fn validate(cfg: &LoadedConfig) -> Result<(ExperimentConfig, ExperimentData), CliError> {
    let exp = cfg.file.experiment_config();
    exp.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let data = cfg.load_data()?;
    exp.validate_for(&data)
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok((exp, data))
}
