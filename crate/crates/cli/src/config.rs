//! Experiment configuration: one TOML document per invocation, with
//! `--set section.key=value` overrides applied before validation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use scalweight::data::{
    gen_conflicting_axes, gen_multidomain, gen_multitask, load_csv, standardize_targets, ConflictingAxesConfig,
    CsvSchema, DataSplits, MultiDomainConfig, MultiSourceDataset, MultiTaskConfig,
};
use scalweight::grad_mto::CagradConfig;
use scalweight::nn::{Activation, Capacity, OptimizerConfig, OptimizerKind, Schedule};
use scalweight::pbt::{PbtConfig, RetrainMode};
use scalweight::train::{Method, TrainConfig, WeightSchedule};
use scalweight::weighting::WeightVector;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    pub training: TrainingSection,
    #[serde(default = "Method::scalarization")]
    pub method: Method,
    #[serde(default)]
    pub weights: WeightsSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub pbt: PbtSection,
    #[serde(default)]
    pub profile: ProfileSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub source: DatasetSource,
    #[serde(default = "default_validation")]
    pub validation: f64,
    #[serde(default = "default_test")]
    pub test: f64,
    #[serde(default)]
    pub split_seed: u64,
    /// Standardize regression targets with training-split statistics.
    #[serde(default)]
    pub standardize: bool,
}

fn default_validation() -> f64 {
    0.1
}

fn default_test() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSource {
    MultiDomain(MultiDomainConfig),
    MultiTask(MultiTaskConfig),
    ConflictingAxes(ConflictingAxesConfig),
    Csv(CsvSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    /// Relative paths are resolved against the config file's directory.
    pub path: PathBuf,
    pub schema: CsvSchema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub trunk_depth: usize,
    pub base_width: usize,
    pub width_multiplier: f64,
    pub head_depth: usize,
    pub shared_head_layers: usize,
    pub activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            trunk_depth: 2,
            base_width: 32,
            width_multiplier: 1.0,
            head_depth: 0,
            shared_head_layers: 0,
            activation: Activation::Relu,
        }
    }
}

impl ModelSection {
    pub fn capacity(&self, width_multiplier: f64) -> Capacity {
        Capacity {
            trunk_depth: self.trunk_depth,
            base_width: self.base_width,
            width_multiplier,
            head_depth: self.head_depth,
            shared_head_layers: self.shared_head_layers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "one")]
    pub accumulation: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile_stride: Option<usize>,
    #[serde(default)]
    pub optimizer: OptimizerSection,
}

fn default_batch() -> usize {
    32
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub schedule: Schedule,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let base = OptimizerConfig::sgd(0.05, 0.9, 1);
        Self {
            kind: base.kind,
            learning_rate: base.learning_rate,
            momentum: base.momentum,
            beta1: base.beta1,
            beta2: base.beta2,
            eps: base.eps,
            weight_decay: base.weight_decay,
            warmup_epochs: base.warmup_epochs,
            schedule: base.schedule,
        }
    }
}

impl OptimizerSection {
    pub fn build(&self, total_epochs: usize) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.kind,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            warmup_epochs: self.warmup_epochs,
            schedule: self.schedule,
            total_epochs,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightsSection {
    /// Constant weights; uniform when neither `p` nor `schedule` is given.
    pub p: Option<Vec<f64>>,
    pub schedule: Vec<ScheduleEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    pub epoch: usize,
    pub p: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// Evenly spaced two-task grid size (ignored when `grid` is given).
    pub points: usize,
    pub grid: Vec<Vec<f64>>,
    pub include_vertices: bool,
    pub sd_baselines: bool,
    /// Capacity sweep; empty means the model section's width multiplier.
    pub width_multipliers: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            points: 11,
            grid: Vec::new(),
            include_vertices: false,
            sd_baselines: false,
            width_multipliers: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PbtSection {
    pub population: usize,
    pub ready_epochs: usize,
    pub quantile: f64,
    pub perturb_factors: (f64, f64),
    pub resample_probability: f64,
    /// Fraction of the training split held out for ranking.
    pub holdout_fraction: f64,
    pub seed: u64,
    pub retrain: RetrainMode,
    /// Retraining length; defaults to the search length.
    pub retrain_epochs: Option<usize>,
}

impl Default for PbtSection {
    fn default() -> Self {
        let d = PbtConfig::default();
        Self {
            population: d.population,
            ready_epochs: d.ready_epochs,
            quantile: d.quantile,
            perturb_factors: d.perturb_factors,
            resample_probability: d.resample_probability,
            holdout_fraction: d.holdout_fraction,
            seed: d.seed,
            retrain: RetrainMode::Schedule,
            retrain_epochs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileSection {
    pub stride: usize,
    /// Methods compared by the memory profile.
    pub methods: Vec<Method>,
    /// Hyperparameter grid for the conflict variance analysis. Axes:
    /// `learning_rate`, `width_multiplier`, `batch_size`, `seed`.
    pub grid: BTreeMap<String, Vec<f64>>,
}

impl Default for ProfileSection {
    fn default() -> Self {
        Self {
            stride: 1,
            methods: vec![
                Method::scalarization(),
                Method::Uncertainty {
                    s_learning_rate: scalweight::weighting::DEFAULT_S_LEARNING_RATE,
                },
                Method::ImtlL {
                    s_learning_rate: scalweight::weighting::DEFAULT_S_LEARNING_RATE,
                },
                Method::Pcgrad {},
                Method::Graddrop {},
                Method::cagrad(CagradConfig::default()),
            ],
            grid: BTreeMap::new(),
        }
    }
}

pub const GRID_AXES: [&str; 4] = ["learning_rate", "width_multiplier", "batch_size", "seed"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("scalweight-out"),
        }
    }
}

/// Parses `value` as a TOML value, falling back to a plain string.
fn parse_value(value: &str) -> toml::Value {
    format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

/// Applies one `section.key=value` override.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, value) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("--set expects key=value, got '{assignment}'")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::config(format!("--set: malformed key '{path}'")));
    }
    let (last, parents) = keys.split_last().expect("non-empty key path");
    let mut table = doc;
    for (depth, key) in parents.iter().enumerate() {
        let entry = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("--set: '{}' is not a table", keys[..=depth].join("."))))?;
    }
    table.insert(last.to_string(), parse_value(value.trim()));
    Ok(())
}

pub struct LoadedConfig {
    pub config: ExperimentConfig,
    /// Directory of the config file; relative data paths resolve against it.
    pub base_dir: PathBuf,
}

pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::config(e.to_string()))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let merged = toml::to_string(&doc).map_err(|e| CliError::config(e.to_string()))?;
    let de = toml::Deserializer::parse(&merged).map_err(|e| CliError::config(e.to_string()))?;
    let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.message().to_string();
        CliError::config(format!("at '{path}': {msg}"))
    })?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<LoadedConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let config = parse_config(&text, overrides)?;
    Ok(LoadedConfig {
        config,
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    })
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.training.epochs == 0 {
            return Err(CliError::config("training.epochs must be positive"));
        }
        if self.training.seeds.is_empty() {
            return Err(CliError::config("training.seeds must not be empty"));
        }
        if !self.weights.schedule.is_empty() && self.weights.p.is_some() {
            return Err(CliError::config("weights: give either p or schedule, not both"));
        }
        for axis in self.profile.grid.keys() {
            if !GRID_AXES.contains(&axis.as_str()) {
                return Err(CliError::config(format!(
                    "profile.grid: unknown axis '{axis}' (expected one of {GRID_AXES:?})"
                )));
            }
        }
        self.train_config(self.training.seeds[0], self.model.width_multiplier)
            .validate()
            .map_err(|e| CliError::config(e.to_string()))
    }

    /// Makes `seed` the only source of randomness: generator, split, training
    /// and search seeds are all replaced.
    pub fn reseed(&mut self, seed: u64) {
        match &mut self.dataset.source {
            DatasetSource::MultiDomain(c) => c.seed = seed,
            DatasetSource::MultiTask(c) => c.seed = seed,
            DatasetSource::ConflictingAxes(c) => c.seed = seed,
            DatasetSource::Csv(_) => {}
        }
        self.dataset.split_seed = seed;
        let n = self.training.seeds.len() as u64;
        self.training.seeds = (0..n).map(|k| seed.wrapping_add(k)).collect();
        self.pbt.seed = seed;
    }

    pub fn train_config(&self, seed: u64, width_multiplier: f64) -> TrainConfig {
        TrainConfig {
            capacity: self.model.capacity(width_multiplier),
            activation: self.model.activation,
            optimizer: self.training.optimizer.build(self.training.epochs),
            batch_size: self.training.batch_size,
            method: self.method,
            seed,
            accumulation: self.training.accumulation,
            profile_stride: self.training.profile_stride,
        }
    }

    pub fn pbt_config(&self) -> PbtConfig {
        PbtConfig {
            population: self.pbt.population,
            ready_epochs: self.pbt.ready_epochs,
            quantile: self.pbt.quantile,
            total_epochs: self.training.epochs,
            perturb_factors: self.pbt.perturb_factors,
            resample_probability: self.pbt.resample_probability,
            holdout_fraction: self.pbt.holdout_fraction,
            seed: self.pbt.seed,
        }
    }

    pub fn schedule(&self, sources: usize) -> Result<WeightSchedule> {
        if !self.weights.schedule.is_empty() {
            let entries = self
                .weights
                .schedule
                .iter()
                .map(|e| Ok((e.epoch, WeightVector::new(e.p.clone())?)))
                .collect::<scalweight::Result<Vec<_>>>()?;
            return Ok(WeightSchedule::new(entries)?);
        }
        let p = match &self.weights.p {
            Some(p) => WeightVector::new(p.clone())?,
            None => WeightVector::uniform(sources),
        };
        if p.len() != sources {
            return Err(CliError::config(format!(
                "weights.p has {} entries for {sources} sources",
                p.len()
            )));
        }
        Ok(WeightSchedule::constant(p))
    }

    pub fn width_multipliers(&self) -> Vec<f64> {
        if self.sweep.width_multipliers.is_empty() {
            vec![self.model.width_multiplier]
        } else {
            self.sweep.width_multipliers.clone()
        }
    }

    pub fn sweep_grid(&self, sources: usize) -> Result<Vec<WeightVector>> {
        let grid = if self.sweep.grid.is_empty() {
            if sources != 2 {
                return Err(CliError::config("sweep.points only applies to two sources; give sweep.grid"));
            }
            scalweight::experiment::pair_grid(self.sweep.points)?
        } else {
            self.sweep
                .grid
                .iter()
                .map(|p| WeightVector::new(p.clone()))
                .collect::<scalweight::Result<Vec<_>>>()?
        };
        Ok(grid)
    }

    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os("SCALWEIGHT_OUT") {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.output.dir.clone(),
        }
    }
}

impl LoadedConfig {
    pub fn full_dataset(&self) -> Result<MultiSourceDataset> {
        Ok(match &self.config.dataset.source {
            DatasetSource::MultiDomain(c) => gen_multidomain(c)?,
            DatasetSource::MultiTask(c) => gen_multitask(c)?,
            DatasetSource::ConflictingAxes(c) => gen_conflicting_axes(c)?,
            DatasetSource::Csv(c) => {
                let path = if c.path.is_absolute() {
                    c.path.clone()
                } else {
                    self.base_dir.join(&c.path)
                };
                load_csv(path, &c.schema)?
            }
        })
    }

    pub fn splits(&self) -> Result<DataSplits> {
        let d = &self.config.dataset;
        let mut splits = DataSplits::from_dataset(&self.full_dataset()?, d.validation, d.test, d.split_seed)?;
        if d.standardize {
            let (train, stats) = standardize_targets(&splits.train)?;
            splits = DataSplits {
                validation: stats.apply(&splits.validation)?,
                test: stats.apply(&splits.test)?,
                train,
            };
        }
        Ok(splits)
    }

    pub fn dataset_spec(&self) -> serde_json::Value {
        serde_json::to_value(&self.config.dataset).unwrap_or(serde_json::Value::Null)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[dataset.source]
kind = "multi-domain"
n_per_source = [40, 40]

[training]
epochs = 2
"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = parse_config(MINIMAL, &[]).unwrap();
        assert_eq!(c.training.batch_size, 32);
        assert_eq!(c.method, Method::scalarization());
        assert_eq!(c.model.trunk_depth, 2);
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let err = parse_config(&format!("{MINIMAL}\n[training.optimizer]\nlr = 0.1\n"), &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("training.optimizer"), "{msg}");
        assert!(msg.contains("lr"), "{msg}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn overrides_replace_and_create_keys() {
        let c = parse_config(
            MINIMAL,
            &[
                "training.epochs=7".into(),
                "method.name=pcgrad".into(),
                "training.optimizer.learning_rate=0.2".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.training.epochs, 7);
        assert_eq!(c.method, Method::Pcgrad {});
        assert_eq!(c.training.optimizer.learning_rate, 0.2);
        assert!(parse_config(MINIMAL, &["training=3".into(), "training.epochs=1".into()]).is_err());
        assert!(parse_config(MINIMAL, &["nonsense".into()]).is_err());
    }

    #[test]
    fn reseed_replaces_every_seed() {
        let mut c = parse_config(MINIMAL, &[]).unwrap();
        c.reseed(9);
        assert_eq!(c.training.seeds, vec![9, 10, 11]);
        assert_eq!(c.dataset.split_seed, 9);
        assert_eq!(c.pbt.seed, 9);
        match c.dataset.source {
            DatasetSource::MultiDomain(m) => assert_eq!(m.seed, 9),
            _ => unreachable!(),
        }
    }

    #[test]
    fn grid_axes_are_checked() {
        let text = format!("{MINIMAL}\n[profile.grid]\nmomentum = [0.1]\n");
        assert!(parse_config(&text, &[]).is_err());
    }
}
