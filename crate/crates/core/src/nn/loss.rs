//! Per-task losses and evaluation metrics.
//!
//! Targets are stored as a matrix with one row per sample:
//! - softmax cross-entropy: one column holding the class index,
//! - L1: one column per output,
//! - binary cross-entropy: one 0/1 column per attribute (several attributes
//!   may be grouped into one task sharing one weight).
//!
//! Losses are means over the batch (and over output columns for L1 / BCE).

use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    SoftmaxCrossEntropy,
    L1,
    BinaryCrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    Top1Accuracy,
    L1Metric,
    MeanBinaryAccuracy,
}

/// Whether larger metric values are better.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    HigherIsBetter,
    LowerIsBetter,
}

impl MetricKind {
    pub fn orientation(self) -> Orientation {
        match self {
            MetricKind::Top1Accuracy | MetricKind::MeanBinaryAccuracy => Orientation::HigherIsBetter,
            MetricKind::L1Metric => Orientation::LowerIsBetter,
        }
    }

    /// Maps a raw value so that larger is always better.
    pub fn oriented(self, value: f64) -> f64 {
        match self.orientation() {
            Orientation::HigherIsBetter => value,
            Orientation::LowerIsBetter => -value,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Top1Accuracy => "top1_accuracy",
            MetricKind::L1Metric => "l1",
            MetricKind::MeanBinaryAccuracy => "mean_binary_accuracy",
        }
    }
}

impl LossKind {
    pub fn default_metric(self) -> MetricKind {
        match self {
            LossKind::SoftmaxCrossEntropy => MetricKind::Top1Accuracy,
            LossKind::L1 => MetricKind::L1Metric,
            LossKind::BinaryCrossEntropy => MetricKind::MeanBinaryAccuracy,
        }
    }

    /// Number of target columns a head with `output_dim` outputs consumes.
    pub fn target_cols(self, output_dim: usize) -> usize {
        match self {
            LossKind::SoftmaxCrossEntropy => 1,
            LossKind::L1 | LossKind::BinaryCrossEntropy => output_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub loss: LossKind,
    pub output_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<MetricKind>,
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, loss: LossKind, output_dim: usize) -> Self {
        Self {
            name: name.into(),
            loss,
            output_dim,
            metric: None,
        }
    }

    pub fn metric(&self) -> MetricKind {
        self.metric.unwrap_or_else(|| self.loss.default_metric())
    }

    pub fn target_cols(&self) -> usize {
        self.loss.target_cols(self.output_dim)
    }

    pub fn validate(&self) -> Result<()> {
        match self.loss {
            LossKind::SoftmaxCrossEntropy if self.output_dim < 2 => Err(Error::config(format!(
                "task '{}': cross-entropy needs at least 2 logits",
                self.name
            ))),
            _ if self.output_dim == 0 => Err(Error::config(format!("task '{}': output_dim must be positive", self.name))),
            _ => Ok(()),
        }
    }
}

fn check_shapes(kind: LossKind, outputs: &Matrix, targets: &Matrix) -> Result<()> {
    if outputs.rows() != targets.rows() {
        return Err(Error::Dimension {
            context: "targets rows",
            expected: outputs.rows(),
            actual: targets.rows(),
        });
    }
    let want = kind.target_cols(outputs.cols());
    if targets.cols() != want {
        return Err(Error::Dimension {
            context: "targets columns",
            expected: want,
            actual: targets.cols(),
        });
    }
    if outputs.rows() == 0 {
        return Err(Error::data("empty batch"));
    }
    if kind == LossKind::SoftmaxCrossEntropy && outputs.cols() < 2 {
        return Err(Error::config("cross-entropy needs at least 2 logits"));
    }
    Ok(())
}

fn class_index(v: f64, classes: usize) -> Result<usize> {
    if v < 0.0 || v.fract() != 0.0 || v as usize >= classes {
        return Err(Error::data(format!("class label {v} outside 0..{classes}")));
    }
    Ok(v as usize)
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean batch loss and its gradient w.r.t. `outputs`.
pub fn loss_and_grad(kind: LossKind, outputs: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
    check_shapes(kind, outputs, targets)?;
    let (n, d) = (outputs.rows(), outputs.cols());
    let mut grad = Matrix::zeros(n, d);
    let mut total = 0.0;
    match kind {
        LossKind::SoftmaxCrossEntropy => {
            let inv = 1.0 / n as f64;
            for i in 0..n {
                let z = outputs.row(i);
                let y = class_index(targets.get(i, 0), d)?;
                let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
                let lse = m + sum.ln();
                total += lse - z[y];
                let g = grad.row_mut(i);
                for (k, gk) in g.iter_mut().enumerate() {
                    *gk = (z[k] - lse).exp() * inv;
                }
                g[y] -= inv;
            }
            Ok((total * inv, grad))
        }
        LossKind::L1 => {
            let inv = 1.0 / (n * d) as f64;
            for ((g, y), t) in grad
                .as_mut_slice()
                .iter_mut()
                .zip(outputs.as_slice())
                .zip(targets.as_slice())
            {
                let r = y - t;
                total += r.abs();
                *g = if r > 0.0 {
                    inv
                } else if r < 0.0 {
                    -inv
                } else {
                    0.0
                };
            }
            Ok((total * inv, grad))
        }
        LossKind::BinaryCrossEntropy => {
            let inv = 1.0 / (n * d) as f64;
            for ((g, &z), &t) in grad
                .as_mut_slice()
                .iter_mut()
                .zip(outputs.as_slice())
                .zip(targets.as_slice())
            {
                if t != 0.0 && t != 1.0 {
                    return Err(Error::data(format!("binary target {t} is not 0 or 1")));
                }
                total += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
                *g = (sigmoid(z) - t) * inv;
            }
            Ok((total * inv, grad))
        }
    }
}

/// Per-sample loss values (used when a mixed batch is split across heads).
pub fn loss_value(kind: LossKind, outputs: &Matrix, targets: &Matrix) -> Result<f64> {
    loss_and_grad(kind, outputs, targets).map(|(l, _)| l)
}

pub fn metric(kind: MetricKind, outputs: &Matrix, targets: &Matrix) -> Result<f64> {
    let n = outputs.rows();
    if n == 0 {
        return Err(Error::data("metric on empty set"));
    }
    match kind {
        MetricKind::Top1Accuracy => {
            check_shapes(LossKind::SoftmaxCrossEntropy, outputs, targets)?;
            let mut hits = 0usize;
            for i in 0..n {
                let z = outputs.row(i);
                let mut best = 0;
                for k in 1..z.len() {
                    if z[k] > z[best] {
                        best = k;
                    }
                }
                if best == class_index(targets.get(i, 0), z.len())? {
                    hits += 1;
                }
            }
            Ok(hits as f64 / n as f64)
        }
        MetricKind::L1Metric => {
            check_shapes(LossKind::L1, outputs, targets)?;
            let s: f64 = outputs
                .as_slice()
                .iter()
                .zip(targets.as_slice())
                .map(|(y, t)| (y - t).abs())
                .sum();
            Ok(s / outputs.as_slice().len() as f64)
        }
        MetricKind::MeanBinaryAccuracy => {
            check_shapes(LossKind::BinaryCrossEntropy, outputs, targets)?;
            let hits = outputs
                .as_slice()
                .iter()
                .zip(targets.as_slice())
                .filter(|(z, t)| (**z > 0.0) == (**t == 1.0))
                .count();
            Ok(hits as f64 / outputs.as_slice().len() as f64)
        }
    }
}
