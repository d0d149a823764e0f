//! Weight vectors on the probability simplex, the scalarized update
//! `theta <- theta - lr * sum_t p_t grad L_t`, and the two loss-based
//! baselines (Uncertainty and IMTL-L).

use serde::{Deserialize, Serialize};

use crate::data::{ReweighBatch, SourceGroup, TaskBatch};
use crate::error::{Error, Result};
use crate::nn::{loss_and_grad, Matrix, Model, Optimizer};

const SIMPLEX_TOL: f64 = 1e-12;

/// A point `p` on the probability simplex: `p_t in [0, 1]`, `sum_t p_t = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::InvalidWeights("empty weight vector".into()));
        }
        if let Some(v) = p.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::InvalidWeights(format!("entry {v} outside [0, 1]")));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidWeights(format!("entries sum to {sum}, not 1")));
        }
        Ok(Self(p))
    }

    pub fn uniform(t: usize) -> Self {
        assert!(t > 0, "uniform weights need at least one task");
        simplex_project(&vec![1.0; t]).expect("positive entries")
    }

    /// The vertex `e_t` of the simplex over `len` tasks.
    pub fn vertex(len: usize, t: usize) -> Self {
        assert!(t < len, "vertex {t} out of range for {len} tasks");
        let mut p = vec![0.0; len];
        p[t] = 1.0;
        Self(p)
    }

    /// Two-task weights `(p1, 1 - p1)`.
    pub fn pair(p1: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p1) {
            return Err(Error::InvalidWeights(format!("p1 = {p1} outside [0, 1]")));
        }
        Self::new(vec![p1, 1.0 - p1])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, t: usize) -> f64 {
        self.0[t]
    }

    /// Sources with non-zero weight.
    pub fn active(&self) -> Vec<bool> {
        self.0.iter().map(|p| *p > 0.0).collect()
    }
}

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = Error;

    fn try_from(p: Vec<f64>) -> Result<Self> {
        Self::new(p)
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(w: WeightVector) -> Self {
        w.0
    }
}

/// Divides non-negative entries by their sum.
pub fn simplex_project(raw: &[f64]) -> Result<WeightVector> {
    if raw.is_empty() {
        return Err(Error::InvalidWeights("empty weight vector".into()));
    }
    if let Some(v) = raw.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::InvalidWeights(format!("negative or non-finite entry {v}")));
    }
    let sum: f64 = raw.iter().sum();
    if sum <= 0.0 {
        return Err(Error::InvalidWeights("all entries are zero".into()));
    }
    let mut p: Vec<f64> = raw.iter().map(|v| v / sum).collect();
    // Push the rounding residue into the largest entry so the sum is 1 to
    // within an ulp.
    let residue = 1.0 - p.iter().sum::<f64>();
    if residue != 0.0 {
        let k = (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).expect("non-empty");
        p[k] = (p[k] + residue).clamp(0.0, 1.0);
    }
    WeightVector::new(p)
}

/// `sum_t p_t L_t`.
pub fn scalarized_loss(losses: &[f64], p: &WeightVector) -> Result<f64> {
    if losses.len() != p.len() {
        return Err(Error::Dimension {
            context: "per-task losses",
            expected: p.len(),
            actual: losses.len(),
        });
    }
    if losses.iter().any(|l| l.is_nan()) {
        return Err(Error::Divergence {
            task: losses.iter().position(|l| l.is_nan()),
            reason: "NaN loss".into(),
        });
    }
    Ok(losses.iter().zip(p.as_slice()).map(|(l, w)| l * w).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalarizationMode {
    /// Per-source sub-batches, gradients weighted by `p`.
    Reweigh,
    /// One mixed batch drawn from the mixture `sum_t p_t q_t`, unweighted.
    Resample,
}

/// Gradient of `sum_t coeffs[t] L_t` over the parts of a reweigh batch, and
/// the per-task losses that were computed. Parts with a zero coefficient are
/// skipped entirely, so `coeffs = e_t` reproduces a single-source step.
pub fn weighted_gradient(model: &Model, batch: &ReweighBatch, coeffs: &[f64]) -> Result<(Vec<f64>, Vec<Option<f64>>)> {
    if coeffs.len() != batch.parts.len() {
        return Err(Error::Dimension {
            context: "loss coefficients",
            expected: batch.parts.len(),
            actual: coeffs.len(),
        });
    }
    let mut losses = vec![None; coeffs.len()];
    let used: Vec<&TaskBatch> = batch
        .parts
        .iter()
        .zip(coeffs)
        .filter_map(|(part, c)| part.as_ref().filter(|_| *c != 0.0))
        .collect();
    if used.is_empty() {
        return Err(Error::InvalidWeights("no drawn source has a non-zero weight".into()));
    }
    let scaled = |part: &TaskBatch, outputs: &Matrix, losses: &mut Vec<Option<f64>>| -> Result<Matrix> {
        let (loss, mut g) = loss_and_grad(part.loss, outputs, &part.targets)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                task: Some(part.source),
                reason: format!("loss is {loss}"),
            });
        }
        losses[part.source] = Some(loss);
        let c = coeffs[part.source];
        if c != 1.0 {
            g.scale(c);
        }
        Ok(g)
    };
    if batch.shared_inputs {
        let heads: Vec<usize> = used.iter().map(|p| p.head).collect();
        let (outputs, tape) = model.forward_heads(&used[0].inputs, &heads)?;
        let grads = used
            .iter()
            .zip(&outputs)
            .map(|(part, out)| scaled(part, out, &mut losses))
            .collect::<Result<Vec<_>>>()?;
        return Ok((model.backward_heads(&tape, &grads)?, losses));
    }
    let mut total: Option<Vec<f64>> = None;
    for part in used {
        let (out, tape) = model.forward(&part.inputs, part.head)?;
        let g = scaled(part, &out, &mut losses)?;
        let grad = model.backward(&tape, &g)?;
        match total.as_mut() {
            None => total = Some(grad),
            Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += b),
        }
    }
    Ok((total.expect("at least one part"), losses))
}

/// Gradient of the mean loss over a mixed batch, given its per-source groups:
/// `sum_g (n_g / B) grad L_g` where `L_g` is the mean loss of group `g`.
pub fn resample_gradient(model: &Model, groups: &[SourceGroup], source_count: usize) -> Result<(Vec<f64>, Vec<Option<f64>>)> {
    let total: usize = groups.iter().map(TaskBatch::len).sum();
    if total == 0 {
        return Err(Error::data("empty mixed batch"));
    }
    let mut losses = vec![None; source_count];
    let mut grad = vec![0.0; model.param_count()];
    for g in groups {
        let (out, tape) = model.forward(&g.inputs, g.head)?;
        let (loss, mut lg) = loss_and_grad(g.loss, &out, &g.targets)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                task: Some(g.source),
                reason: format!("loss is {loss}"),
            });
        }
        losses[g.source] = Some(loss);
        lg.scale(g.len() as f64 / total as f64);
        for (a, b) in grad.iter_mut().zip(model.backward(&tape, &lg)?) {
            *a += b;
        }
    }
    Ok((grad, losses))
}

/// A batch in the layout required by one of the two scalarization modes.
#[derive(Debug, Clone, Copy)]
pub enum ScalarizedBatch<'a> {
    Reweigh(&'a ReweighBatch),
    Resample { groups: &'a [SourceGroup], source_count: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub losses: Vec<Option<f64>>,
    pub learning_rate: f64,
}

/// One optimizer step on the scalarized objective.
pub fn scalarized_step(
    model: &mut Model,
    optimizer: &mut Optimizer,
    step_index: usize,
    batch: ScalarizedBatch<'_>,
    p: &WeightVector,
) -> Result<StepRecord> {
    let (grad, losses) = match batch {
        ScalarizedBatch::Reweigh(b) => weighted_gradient(model, b, p.as_slice())?,
        ScalarizedBatch::Resample { groups, source_count } => resample_gradient(model, groups, source_count)?,
    };
    let learning_rate = optimizer.step(model, &grad, step_index)?;
    Ok(StepRecord { losses, learning_rate })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptiveMethod {
    Uncertainty,
    ImtlL,
}

/// Learnable log-scales `s_t` of a loss-based method, updated by plain SGD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveLossState {
    pub method: AdaptiveMethod,
    pub s: Vec<f64>,
    pub learning_rate: f64,
}

pub const DEFAULT_S_LEARNING_RATE: f64 = 0.025;

impl AdaptiveLossState {
    pub fn new(method: AdaptiveMethod, tasks: usize) -> Self {
        Self {
            method,
            s: vec![0.0; tasks],
            learning_rate: DEFAULT_S_LEARNING_RATE,
        }
    }

    /// Multiplier applied to each task loss: `exp(-s_t)` or `exp(s_t)`.
    pub fn loss_coefficients(&self) -> Vec<f64> {
        self.s
            .iter()
            .map(|s| match self.method {
                AdaptiveMethod::Uncertainty => (-s).exp(),
                AdaptiveMethod::ImtlL => s.exp(),
            })
            .collect()
    }

    /// The loss coefficients normalized onto the simplex.
    pub fn implied_weights(&self) -> Result<WeightVector> {
        simplex_project(&self.loss_coefficients())
    }

    pub fn total_and_grad(&self, losses: &[f64]) -> Result<(f64, Vec<f64>)> {
        match self.method {
            AdaptiveMethod::Uncertainty => uncertainty_loss(losses, self),
            AdaptiveMethod::ImtlL => imtl_l_loss(losses, self),
        }
    }

    /// `s <- s - lr * d total / d s`.
    pub fn update(&mut self, grad_s: &[f64]) -> Result<()> {
        if grad_s.len() != self.s.len() {
            return Err(Error::Dimension {
                context: "adaptive-loss gradient",
                expected: self.s.len(),
                actual: grad_s.len(),
            });
        }
        let next: Vec<f64> = self.s.iter().zip(grad_s).map(|(s, g)| s - self.learning_rate * g).collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                task: next.iter().position(|v| !v.is_finite()),
                reason: "adaptive loss scale became non-finite".into(),
            });
        }
        self.s = next;
        Ok(())
    }
}

fn check_adaptive(losses: &[f64], state: &AdaptiveLossState, method: AdaptiveMethod) -> Result<()> {
    if state.method != method {
        return Err(Error::config(format!("state is for {:?}, not {method:?}", state.method)));
    }
    if losses.len() != state.s.len() {
        return Err(Error::Dimension {
            context: "per-task losses",
            expected: state.s.len(),
            actual: losses.len(),
        });
    }
    Ok(())
}

/// `sum_t exp(-s_t) L_t + s_t / 2` and its gradient `-exp(-s_t) L_t + 1/2`.
pub fn uncertainty_loss(losses: &[f64], state: &AdaptiveLossState) -> Result<(f64, Vec<f64>)> {
    check_adaptive(losses, state, AdaptiveMethod::Uncertainty)?;
    let mut total = 0.0;
    let grad = losses
        .iter()
        .zip(&state.s)
        .map(|(l, s)| {
            let w = (-s).exp();
            total += w * l + s / 2.0;
            -w * l + 0.5
        })
        .collect();
    Ok((total, grad))
}

/// `sum_t exp(s_t) L_t - s_t` and its gradient `exp(s_t) L_t - 1`.
pub fn imtl_l_loss(losses: &[f64], state: &AdaptiveLossState) -> Result<(f64, Vec<f64>)> {
    check_adaptive(losses, state, AdaptiveMethod::ImtlL)?;
    let mut total = 0.0;
    let grad = losses
        .iter()
        .zip(&state.s)
        .map(|(l, s)| {
            let w = s.exp();
            total += w * l - s;
            w * l - 1.0
        })
        .collect();
    Ok((total, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_examples() {
        assert_eq!(simplex_project(&[2.0, 1.0, 1.0]).unwrap().as_slice(), &[0.5, 0.25, 0.25]);
        assert_eq!(simplex_project(&[7.0]).unwrap().as_slice(), &[1.0]);
        let p = simplex_project(&[0.625, 0.4]).unwrap();
        let q = simplex_project(p.as_slice()).unwrap();
        for (a, b) in p.as_slice().iter().zip(q.as_slice()) {
            assert!((a - b).abs() <= 1e-15);
        }
        assert!(simplex_project(&[1.0, -0.1]).is_err());
        assert!(simplex_project(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn weight_vector_validation() {
        assert!(WeightVector::new(vec![0.5, 0.6]).is_err());
        assert!(WeightVector::new(vec![1.2, -0.2]).is_err());
        assert!(WeightVector::new(vec![]).is_err());
        let w: WeightVector = serde_json::from_str("[0.25,0.75]").unwrap();
        assert_eq!(w.get(1), 0.75);
        assert!(serde_json::from_str::<WeightVector>("[0.25,0.5]").is_err());
        let u = WeightVector::uniform(3);
        assert!((u.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn scalarized_loss_examples() {
        let l = [1.0, 3.0];
        assert_eq!(scalarized_loss(&l, &WeightVector::uniform(2)).unwrap(), 2.0);
        assert_eq!(scalarized_loss(&[1.7, 9.0], &WeightVector::vertex(2, 0)).unwrap(), 1.7);
        assert_eq!(scalarized_loss(&l, &WeightVector::pair(0.25).unwrap()).unwrap(), 2.5);
        assert!(scalarized_loss(&[f64::NAN, 1.0], &WeightVector::uniform(2)).is_err());
        assert!(scalarized_loss(&[1.0], &WeightVector::uniform(2)).is_err());
    }

    #[test]
    fn uncertainty_closed_forms() {
        let mut st = AdaptiveLossState::new(AdaptiveMethod::Uncertainty, 2);
        let (total, _) = uncertainty_loss(&[1.5, 2.5], &st).unwrap();
        assert_eq!(total, 4.0);
        st.s = vec![4f64.ln(), 8f64.ln()];
        let (_, g) = uncertainty_loss(&[2.0, 4.0], &st).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
        assert!(imtl_l_loss(&[1.0, 1.0], &st).is_err());
    }

    #[test]
    fn imtl_closed_forms() {
        let mut st = AdaptiveLossState::new(AdaptiveMethod::ImtlL, 2);
        let (total, g) = imtl_l_loss(&[1.0, 1.0], &st).unwrap();
        assert_eq!(total, 2.0);
        assert_eq!(g, vec![0.0, 0.0]);
        st.s = vec![-(2f64.ln()), 0.0];
        let (_, g) = imtl_l_loss(&[2.0, 1.0], &st).unwrap();
        assert!(g[0].abs() < 1e-15);
    }

    #[test]
    fn adaptive_sgd_update() {
        let mut st = AdaptiveLossState::new(AdaptiveMethod::ImtlL, 1);
        let (_, g) = st.total_and_grad(&[3.0]).unwrap();
        st.update(&g).unwrap();
        assert_eq!(st.s, vec![-0.025 * 2.0]);
        let w = st.implied_weights().unwrap();
        assert_eq!(w.as_slice(), &[1.0]);
    }
}
