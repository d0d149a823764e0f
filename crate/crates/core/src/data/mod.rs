//! Multi-source datasets.
//!
//! A dataset holds `T` labeled sources. In multi-domain mode every source
//! shares one label space and one model head; in multi-task mode every
//! source is one task over the same shared input rows, with its own head.

mod csv_io;
mod generate;
mod sampler;
mod standardize;

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use csv_io::{load_csv, read_csv, write_csv, CsvSchema};
pub use generate::{
    gen_conflicting_axes, gen_multidomain, gen_multitask, gen_multitask_with_gram, generating_vectors, ConflictingAxesConfig, MultiDomainConfig, MultiTaskConfig,
    TargetKind,
};
pub use sampler::{EpochConvention, MixedBatch, ReweighBatch, ReweighSampler, ResamplingSampler, SourceGroup, TaskBatch};
pub use standardize::{standardize_targets, Standardization};

use crate::error::{Error, Result};
use crate::nn::{Matrix, TaskSpec};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    MultiDomain,
    MultiTask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Source {
    pub name: String,
    pub inputs: Arc<Matrix>,
    pub targets: Matrix,
}

impl Source {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiSourceDataset {
    mode: Mode,
    tasks: Vec<TaskSpec>,
    sources: Vec<Source>,
    reference_source: usize,
}

impl MultiSourceDataset {
    pub fn new(mode: Mode, tasks: Vec<TaskSpec>, sources: Vec<Source>, reference_source: usize) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::data("dataset has no sources"));
        }
        for t in &tasks {
            t.validate()?;
        }
        match mode {
            Mode::MultiDomain if tasks.len() != 1 => {
                return Err(Error::data("multi-domain datasets have exactly one shared task"));
            }
            Mode::MultiTask if tasks.len() != sources.len() => {
                return Err(Error::data("multi-task datasets need one source per task"));
            }
            _ => {}
        }
        let dim = sources[0].inputs.cols();
        for (t, s) in sources.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::EmptySource(s.name.clone()));
            }
            if s.inputs.cols() != dim {
                return Err(Error::data(format!("source '{}' has {} features, expected {dim}", s.name, s.inputs.cols())));
            }
            if s.targets.rows() != s.inputs.rows() {
                return Err(Error::data(format!("source '{}' has mismatched input/target rows", s.name)));
            }
            let task = match mode {
                Mode::MultiDomain => &tasks[0],
                Mode::MultiTask => &tasks[t],
            };
            if s.targets.cols() != task.target_cols() {
                return Err(Error::data(format!(
                    "source '{}' has {} target columns, task '{}' needs {}",
                    s.name,
                    s.targets.cols(),
                    task.name,
                    task.target_cols()
                )));
            }
            if mode == Mode::MultiTask && *s.inputs != *sources[0].inputs {
                return Err(Error::data("multi-task sources must share the same inputs"));
            }
        }
        if reference_source >= sources.len() {
            return Err(Error::data(format!("reference source {reference_source} out of range")));
        }
        Ok(Self {
            mode,
            tasks,
            sources,
            reference_source,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn sources(&self) -> &[Source] {
        &self.sources
    }

    pub fn source(&self, t: usize) -> &Source {
        &self.sources[t]
    }

    pub fn source_count(&self) -> usize {
        self.sources.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.sources.iter().map(Source::len).collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.sources[0].inputs.cols()
    }

    pub fn reference_source(&self) -> usize {
        self.reference_source
    }

    pub fn with_reference_source(mut self, reference: usize) -> Result<Self> {
        if reference >= self.sources.len() {
            return Err(Error::data(format!("reference source {reference} out of range")));
        }
        self.reference_source = reference;
        Ok(self)
    }

    /// Model head trained by source `t`.
    pub fn head_of(&self, t: usize) -> usize {
        match self.mode {
            Mode::MultiDomain => 0,
            Mode::MultiTask => t,
        }
    }

    pub fn task_of(&self, t: usize) -> &TaskSpec {
        &self.tasks[self.head_of(t)]
    }

    /// Output dimension of every model head.
    pub fn head_outputs(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.output_dim).collect()
    }

    pub fn source_names(&self) -> Vec<String> {
        self.sources.iter().map(|s| s.name.clone()).collect()
    }

    /// Splits every source into `(first, rest)` with `round(fraction * n)`
    /// rows in the first part (at least one row in each part). Multi-task
    /// sources are split with one shared permutation so inputs stay shared.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::config(format!("split fraction {fraction} must be in (0, 1)")));
        }
        let cut = |n: usize| -> Result<usize> {
            if n < 2 {
                return Err(Error::data("cannot split a source with fewer than two rows"));
            }
            Ok(((fraction * n as f64).round() as usize).clamp(1, n - 1))
        };
        let mut first = Vec::with_capacity(self.sources.len());
        let mut rest = Vec::with_capacity(self.sources.len());
        match self.mode {
            Mode::MultiTask => {
                let n = self.sources[0].len();
                let k = cut(n)?;
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng::seeded(seed, 0));
                let (a, b) = perm.split_at(k);
                let xa = Arc::new(self.sources[0].inputs.select_rows(a));
                let xb = Arc::new(self.sources[0].inputs.select_rows(b));
                for s in &self.sources {
                    first.push(Source {
                        name: s.name.clone(),
                        inputs: Arc::clone(&xa),
                        targets: s.targets.select_rows(a),
                    });
                    rest.push(Source {
                        name: s.name.clone(),
                        inputs: Arc::clone(&xb),
                        targets: s.targets.select_rows(b),
                    });
                }
            }
            Mode::MultiDomain => {
                for (t, s) in self.sources.iter().enumerate() {
                    let n = s.len();
                    let k = cut(n)?;
                    let mut perm: Vec<usize> = (0..n).collect();
                    perm.shuffle(&mut rng::seeded(seed, 1 + t as u64));
                    let (a, b) = perm.split_at(k);
                    first.push(Source {
                        name: s.name.clone(),
                        inputs: Arc::new(s.inputs.select_rows(a)),
                        targets: s.targets.select_rows(a),
                    });
                    rest.push(Source {
                        name: s.name.clone(),
                        inputs: Arc::new(s.inputs.select_rows(b)),
                        targets: s.targets.select_rows(b),
                    });
                }
            }
        }
        Ok((
            Self::new(self.mode, self.tasks.clone(), first, self.reference_source)?,
            Self::new(self.mode, self.tasks.clone(), rest, self.reference_source)?,
        ))
    }

    /// Replaces the targets of every source (same shapes required).
    pub(crate) fn with_targets(&self, targets: Vec<Matrix>) -> Result<Self> {
        let sources = self
            .sources
            .iter()
            .zip(targets)
            .map(|(s, t)| Source {
                name: s.name.clone(),
                inputs: Arc::clone(&s.inputs),
                targets: t,
            })
            .collect();
        Self::new(self.mode, self.tasks.clone(), sources, self.reference_source)
    }
}

/// Train / validation / test partition used by experiments.
#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: MultiSourceDataset,
    pub validation: MultiSourceDataset,
    pub test: MultiSourceDataset,
}

impl DataSplits {
    /// Splits `full` into train / validation / test with the given fractions
    /// for validation and test.
    pub fn from_dataset(full: &MultiSourceDataset, validation: f64, test: f64, seed: u64) -> Result<Self> {
        if !(validation > 0.0 && test > 0.0 && validation + test < 1.0) {
            return Err(Error::config("validation and test fractions must be positive and sum below 1"));
        }
        let (train, held) = full.split(1.0 - validation - test, rng::derive_seed(seed, 0x5917))?;
        let (validation, test) = held.split(validation / (validation + test), rng::derive_seed(seed, 0x7e57))?;
        Ok(Self { train, validation, test })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LossKind;

    fn tiny_mdl() -> MultiSourceDataset {
        let s = |name: &str, n: usize, off: f64| Source {
            name: name.into(),
            inputs: Arc::new(Matrix::from_vec(n, 2, (0..2 * n).map(|i| i as f64 + off).collect()).unwrap()),
            targets: Matrix::from_vec(n, 1, (0..n).map(|i| (i % 2) as f64).collect()).unwrap(),
        };
        MultiSourceDataset::new(
            Mode::MultiDomain,
            vec![TaskSpec::new("y", LossKind::SoftmaxCrossEntropy, 2)],
            vec![s("a", 10, 0.0), s("b", 6, 100.0)],
            0,
        )
        .unwrap()
    }

    #[test]
    fn split_partitions_each_source() {
        let ds = tiny_mdl();
        let (a, b) = ds.split(0.7, 3).unwrap();
        assert_eq!(a.counts(), vec![7, 4]);
        assert_eq!(b.counts(), vec![3, 2]);
        let mut rows: Vec<f64> = a.source(0).inputs.as_slice().iter().step_by(2).copied().collect();
        rows.extend(b.source(0).inputs.as_slice().iter().step_by(2));
        rows.sort_by(f64::total_cmp);
        assert_eq!(rows, (0..10).map(|i| 2.0 * i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn constructor_validates_shape_rules() {
        let ds = tiny_mdl();
        let mut sources = ds.sources().to_vec();
        sources[1].inputs = Arc::new(Matrix::zeros(6, 3));
        assert!(MultiSourceDataset::new(Mode::MultiDomain, ds.tasks().to_vec(), sources, 0).is_err());
        let mut sources = ds.sources().to_vec();
        sources[1].inputs = Arc::new(Matrix::zeros(0, 2));
        sources[1].targets = Matrix::zeros(0, 1);
        assert!(matches!(
            MultiSourceDataset::new(Mode::MultiDomain, ds.tasks().to_vec(), sources, 0),
            Err(Error::EmptySource(name)) if name == "b"
        ));
        assert!(MultiSourceDataset::new(Mode::MultiTask, ds.tasks().to_vec(), ds.sources().to_vec(), 0).is_err());
    }
}
