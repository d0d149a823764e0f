//! Gradient-based multi-task optimization: per-task gradients, conflict
//! test, and the PCGrad, GradDrop and CAGrad combiners. All operate on whole
//! flattened gradients.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ReweighBatch, TaskBatch};
use crate::error::{Error, Result};
use crate::nn::{loss_and_grad, Model};

/// One flattened gradient per task for the same parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub grads: Vec<Vec<f64>>,
    pub task_ids: Vec<usize>,
    pub losses: Vec<f64>,
    param_count: usize,
}

impl GradientSet {
    pub fn new(grads: Vec<Vec<f64>>) -> Result<Self> {
        let param_count = grads.first().map(Vec::len).unwrap_or(0);
        if grads.is_empty() || param_count == 0 {
            return Err(Error::data("gradient set needs at least one non-empty gradient"));
        }
        if let Some(g) = grads.iter().find(|g| g.len() != param_count) {
            return Err(Error::Dimension {
                context: "gradient set",
                expected: param_count,
                actual: g.len(),
            });
        }
        let task_ids = (0..grads.len()).collect();
        let losses = vec![f64::NAN; grads.len()];
        Ok(Self {
            grads,
            task_ids,
            losses,
            param_count,
        })
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    /// Number of gradient values held: `T * P`.
    pub fn stored_values(&self) -> usize {
        self.grads.len() * self.param_count
    }

    pub fn sum(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.param_count];
        for g in &self.grads {
            add_into(&mut out, g);
        }
        out
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.grads.len() as f64;
        self.sum().into_iter().map(|v| v / n).collect()
    }

    /// Element-wise average of several sets for the same tasks (gradient
    /// accumulation over micro-batches before combining).
    pub fn accumulate(sets: &[GradientSet]) -> Result<GradientSet> {
        let first = sets.first().ok_or_else(|| Error::data("nothing to accumulate"))?;
        let k = sets.len() as f64;
        let mut grads = vec![vec![0.0; first.param_count]; first.len()];
        let mut losses = vec![0.0; first.len()];
        for s in sets {
            if s.task_ids != first.task_ids || s.param_count != first.param_count {
                return Err(Error::data("accumulated gradient sets disagree on tasks or size"));
            }
            for (acc, g) in grads.iter_mut().zip(&s.grads) {
                add_into(acc, g);
            }
            for (a, l) in losses.iter_mut().zip(&s.losses) {
                *a += l;
            }
        }
        for g in &mut grads {
            g.iter_mut().for_each(|v| *v /= k);
        }
        Ok(GradientSet {
            grads,
            task_ids: first.task_ids.clone(),
            losses: losses.into_iter().map(|l| l / k).collect(),
            param_count: first.param_count,
        })
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// One backward pass per drawn task (`T` passes in total), in task order.
pub fn per_task_gradients(model: &Model, batch: &ReweighBatch) -> Result<GradientSet> {
    let parts: Vec<&TaskBatch> = batch.parts.iter().flatten().collect();
    if parts.is_empty() {
        return Err(Error::data("batch has no task parts"));
    }
    let mut grads = Vec::with_capacity(parts.len());
    let mut losses = Vec::with_capacity(parts.len());
    for part in &parts {
        let (out, tape) = model.forward(&part.inputs, part.head)?;
        let (loss, lg) = loss_and_grad(part.loss, &out, &part.targets)?;
        let g = model.backward(&tape, &lg)?;
        if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                task: Some(part.source),
                reason: "non-finite per-task loss or gradient".into(),
            });
        }
        grads.push(g);
        losses.push(loss);
    }
    Ok(GradientSet {
        param_count: model.param_count(),
        grads,
        task_ids: parts.iter().map(|p| p.source).collect(),
        losses,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConflictTest {
    pub cosine: f64,
    pub conflicting: bool,
    /// One of the vectors is zero; the pair counts as non-conflicting.
    pub degenerate: bool,
}

/// Two gradients conflict when their cosine is negative.
pub fn is_conflicting(a: &[f64], b: &[f64]) -> ConflictTest {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return ConflictTest {
            cosine: 0.0,
            conflicting: false,
            degenerate: true,
        };
    }
    let cosine = (dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
    ConflictTest {
        cosine,
        conflicting: cosine < 0.0,
        degenerate: false,
    }
}

/// Projects each task gradient onto the normal plane of every conflicting
/// original gradient of the other tasks (visited in a random order) and
/// returns the sum of the projected gradients.
pub fn pcgrad_combine<R: Rng + ?Sized>(set: &GradientSet, rng: &mut R) -> Vec<f64> {
    pcgrad_project(set, rng).iter().fold(vec![0.0; set.param_count], |mut acc, g| {
        add_into(&mut acc, g);
        acc
    })
}

/// The projected per-task gradients of [`pcgrad_combine`].
pub fn pcgrad_project<R: Rng + ?Sized>(set: &GradientSet, rng: &mut R) -> Vec<Vec<f64>> {
    let t = set.len();
    let sq: Vec<f64> = set.grads.iter().map(|g| dot(g, g)).collect();
    (0..t)
        .map(|i| {
            let mut gi = set.grads[i].clone();
            let mut order: Vec<usize> = (0..t).filter(|&j| j != i).collect();
            order.shuffle(rng);
            for j in order {
                let gj = &set.grads[j];
                let d = dot(&gi, gj);
                if d < 0.0 && sq[j] > 0.0 {
                    let c = d / sq[j];
                    gi.iter_mut().zip(gj).for_each(|(a, b)| *a -= c * b);
                }
            }
            gi
        })
        .collect()
}

/// Keeps, per coordinate, only the positive or only the negative task
/// contributions. Positive is kept with probability `(1 + r) / 2` where
/// `r = sum_t g_t / sum_t |g_t|` is the sign purity.
pub fn graddrop_combine<R: Rng + ?Sized>(set: &GradientSet, rng: &mut R) -> Vec<f64> {
    (0..set.param_count)
        .map(|k| {
            let u: f64 = rng.random();
            graddrop_coordinate(set.grads.iter().map(|g| g[k]), u)
        })
        .collect()
}

/// The GradDrop rule for one coordinate with a given uniform draw `u`.
pub fn graddrop_coordinate(values: impl Iterator<Item = f64> + Clone, u: f64) -> f64 {
    let (sum, abs): (f64, f64) = values.clone().fold((0.0, 0.0), |(s, a), v| (s + v, a + v.abs()));
    let purity = if abs > 0.0 { sum / abs } else { 0.0 };
    let keep_positive = u < 0.5 * (1.0 + purity);
    values
        .filter(|v| if keep_positive { *v > 0.0 } else { *v < 0.0 })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CagradConfig {
    pub c: f64,
    pub inner_iters: usize,
    pub inner_lr: f64,
}

impl Default for CagradConfig {
    fn default() -> Self {
        Self {
            c: 0.4,
            inner_iters: 25,
            inner_lr: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CagradOutput {
    pub direction: Vec<f64>,
    /// Task mixture `w` found by the inner solver.
    pub weights: Vec<f64>,
    /// Inner objective after initialization and after each iteration.
    pub objective_trace: Vec<f64>,
    /// The inner solver failed and the mean gradient was returned.
    pub fallback: bool,
}

/// Euclidean projection onto the probability simplex.
pub fn euclidean_simplex_projection(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, ui) in u.iter().enumerate() {
        cum += ui;
        let t = (cum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// CAGrad: with `g0` the mean gradient and `phi = c^2 |g0|^2`, minimizes
/// `F(w) = g_w . g0 + sqrt(phi) |g_w|` over the simplex by projected
/// gradient descent on the task Gram matrix, then returns
/// `d = g0 + sqrt(phi) / |g_w| g_w`.
pub fn cagrad_combine(set: &GradientSet, config: &CagradConfig) -> CagradOutput {
    let t = set.len();
    let g0 = set.mean();
    let g0_sq = dot(&g0, &g0);
    let sqrt_phi = config.c * g0_sq.sqrt();
    let uniform = vec![1.0 / t as f64; t];
    let fallback = |trace: Vec<f64>| CagradOutput {
        direction: g0.clone(),
        weights: uniform.clone(),
        objective_trace: trace,
        fallback: true,
    };
    if sqrt_phi == 0.0 {
        return CagradOutput {
            direction: g0.clone(),
            weights: uniform.clone(),
            objective_trace: Vec::new(),
            fallback: false,
        };
    }
    let gram: Vec<Vec<f64>> = (0..t)
        .map(|i| (0..t).map(|j| dot(&set.grads[i], &set.grads[j])).collect())
        .collect();
    // b_i = g_i . g0
    let b: Vec<f64> = (0..t).map(|i| gram[i].iter().sum::<f64>() / t as f64).collect();
    let quad = |w: &[f64]| -> f64 {
        (0..t)
            .map(|i| w[i] * (0..t).map(|j| gram[i][j] * w[j]).sum::<f64>())
            .sum::<f64>()
            .max(0.0)
    };
    let objective = |w: &[f64]| dot(w, &b) + sqrt_phi * quad(w).sqrt();
    let mut w = uniform.clone();
    let mut f = objective(&w);
    let mut trace = vec![f];
    for _ in 0..config.inner_iters {
        let gw_norm = quad(&w).sqrt();
        let grad: Vec<f64> = (0..t)
            .map(|i| {
                let gw_i: f64 = (0..t).map(|j| gram[i][j] * w[j]).sum();
                b[i] + if gw_norm > 0.0 { sqrt_phi * gw_i / gw_norm } else { 0.0 }
            })
            .collect();
        // Step sizes are relative to the gradient scale; halve until the
        // objective does not increase.
        let scale = grad.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if !scale.is_finite() {
            return fallback(trace);
        }
        if scale == 0.0 {
            trace.push(f);
            continue;
        }
        let mut lr = config.inner_lr / scale;
        let mut accepted = None;
        for _ in 0..30 {
            let cand: Vec<f64> = euclidean_simplex_projection(
                &w.iter().zip(&grad).map(|(wi, gi)| wi - lr * gi).collect::<Vec<_>>(),
            );
            let fc = objective(&cand);
            if !fc.is_finite() {
                return fallback(trace);
            }
            if fc <= f {
                accepted = Some((cand, fc));
                break;
            }
            lr *= 0.5;
        }
        if let Some((cand, fc)) = accepted {
            w = cand;
            f = fc;
        }
        trace.push(f);
    }
    let mut gw = vec![0.0; set.param_count];
    for (wi, g) in w.iter().zip(&set.grads) {
        gw.iter_mut().zip(g).for_each(|(a, v)| *a += wi * v);
    }
    let gw_norm = norm(&gw);
    if !(gw_norm.is_finite() && gw_norm > 0.0) {
        return fallback(trace);
    }
    let k = sqrt_phi / gw_norm;
    let direction: Vec<f64> = g0.iter().zip(&gw).map(|(a, v)| a + k * v).collect();
    if direction.iter().any(|v| !v.is_finite()) {
        return fallback(trace);
    }
    CagradOutput {
        direction,
        weights: w,
        objective_trace: trace,
        fallback: false,
    }
}
