//! Zero-mean, unit-variance scaling of regression targets, with statistics
//! taken from the training split and reused unchanged on evaluation splits.

use serde::{Deserialize, Serialize};

use super::MultiSourceDataset;
use crate::error::{Error, Result};
use crate::nn::{LossKind, Matrix};

/// Per-task, per-column `(mean, std)`; `None` for tasks that are not L1
/// regression and are therefore left untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub stats: Vec<Option<Vec<(f64, f64)>>>,
}

/// Computes population mean and standard deviation of every regression
/// target column over `train` and returns the standardized dataset.
pub fn standardize_targets(train: &MultiSourceDataset) -> Result<(MultiSourceDataset, Standardization)> {
    let tasks = train.tasks();
    if !tasks.iter().any(|t| t.loss == LossKind::L1) {
        return Err(Error::config("standardization needs at least one regression (L1) task"));
    }
    let mut stats = Vec::with_capacity(tasks.len());
    for (head, task) in tasks.iter().enumerate() {
        if task.loss != LossKind::L1 {
            stats.push(None);
            continue;
        }
        let cols = task.target_cols();
        let columns: Vec<(f64, f64)> = (0..cols)
            .map(|c| {
                let values: Vec<f64> = (0..train.source_count())
                    .filter(|&s| train.head_of(s) == head)
                    .flat_map(|s| {
                        let t = &train.source(s).targets;
                        (0..t.rows()).map(move |i| t.get(i, c))
                    })
                    .collect();
                let n = values.len() as f64;
                let mean = values.iter().sum::<f64>() / n;
                let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let std = var.sqrt();
                if !(std > 1e-12 * mean.abs().max(1.0)) {
                    return Err(Error::ZeroVariance { task: head, column: c });
                }
                Ok((mean, std))
            })
            .collect::<Result<_>>()?;
        stats.push(Some(columns));
    }
    let st = Standardization { stats };
    Ok((st.apply(train)?, st))
}

impl Standardization {
    pub fn apply(&self, dataset: &MultiSourceDataset) -> Result<MultiSourceDataset> {
        if self.stats.len() != dataset.tasks().len() {
            return Err(Error::Dimension {
                context: "standardization tasks",
                expected: dataset.tasks().len(),
                actual: self.stats.len(),
            });
        }
        let targets: Vec<Matrix> = (0..dataset.source_count())
            .map(|s| {
                let mut t = dataset.source(s).targets.clone();
                if let Some(cols) = &self.stats[dataset.head_of(s)] {
                    for i in 0..t.rows() {
                        for (c, (mean, std)) in cols.iter().enumerate() {
                            t.set(i, c, (t.get(i, c) - mean) / std);
                        }
                    }
                }
                t
            })
            .collect();
        dataset.with_targets(targets)
    }

    /// Maps standardized values of `task` back to the original scale.
    pub fn invert(&self, task: usize, values: &mut Matrix) {
        if let Some(cols) = &self.stats[task] {
            for i in 0..values.rows() {
                for (c, (mean, std)) in cols.iter().enumerate() {
                    values.set(i, c, values.get(i, c) * std + mean);
                }
            }
        }
    }
}
