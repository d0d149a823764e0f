//! SGD with momentum, AdamW, and warmup + cosine learning-rate schedules.
//!
//! Updates descend: `theta <- theta - lr * direction`.

use serde::{Deserialize, Serialize};

use super::Model;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adamw,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// SGD only.
    #[serde(default)]
    pub momentum: f64,
    /// AdamW only.
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub warmup_epochs: usize,
    pub schedule: Schedule,
    pub total_epochs: usize,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64, momentum: f64, total_epochs: usize) -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            learning_rate,
            momentum,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
            warmup_epochs: 0,
            schedule: Schedule::Constant,
            total_epochs,
        }
    }

    pub fn adamw(learning_rate: f64, total_epochs: usize) -> Self {
        Self {
            kind: OptimizerKind::Adamw,
            learning_rate,
            momentum: 0.0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
            warmup_epochs: 0,
            schedule: Schedule::Constant,
            total_epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if self.total_epochs == 0 {
            return Err(Error::config("total_epochs must be positive"));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::config("warmup_epochs exceeds total_epochs"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::config("adamw betas must be in [0, 1) and eps positive"));
        }
        Ok(())
    }
}

/// Learning rate at a global step: linear warmup from `lr / warmup_steps`
/// reaching `lr` at the end of warmup, then constant or cosine decay to 0 at
/// `total_epochs * steps_per_epoch`.
pub fn lr_at(config: &OptimizerConfig, step: usize, steps_per_epoch: usize) -> f64 {
    let base = config.learning_rate;
    let warmup = config.warmup_epochs * steps_per_epoch;
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    match config.schedule {
        Schedule::Constant => base,
        Schedule::Cosine => {
            let total = config.total_epochs * steps_per_epoch;
            if total <= warmup {
                return 0.0;
            }
            let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
            0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// Mutable optimizer state: update count and the per-parameter buffers
/// (momentum for SGD; first and second moments for AdamW).
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub updates: u64,
    pub buffers: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    steps_per_epoch: usize,
    state: OptimizerState,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, param_count: usize, steps_per_epoch: usize) -> Result<Self> {
        config.validate()?;
        let buffers = match config.kind {
            OptimizerKind::SgdMomentum => vec![vec![0.0; param_count]],
            OptimizerKind::Adamw => vec![vec![0.0; param_count]; 2],
        };
        Ok(Self {
            config,
            steps_per_epoch: steps_per_epoch.max(1),
            state: OptimizerState { updates: 0, buffers },
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn set_state(&mut self, state: OptimizerState) -> Result<()> {
        if state.buffers.len() != self.state.buffers.len()
            || state
                .buffers
                .iter()
                .zip(&self.state.buffers)
                .any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::Checkpoint("optimizer state does not match the optimizer kind".into()));
        }
        self.state = state;
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        lr_at(&self.config, step, self.steps_per_epoch)
    }

    /// Applies one update using the learning rate of `step_index`. Non-finite
    /// gradients are rejected before anything is modified.
    pub fn step(&mut self, model: &mut Model, grad: &[f64], step_index: usize) -> Result<f64> {
        if grad.len() != model.param_count() {
            return Err(Error::Dimension {
                context: "optimizer gradient",
                expected: model.param_count(),
                actual: grad.len(),
            });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                task: None,
                reason: format!("non-finite gradient at parameter {i}"),
            });
        }
        let lr = self.lr_at(step_index);
        let wd = self.config.weight_decay;
        self.state.updates += 1;
        let params = model.params_mut();
        match self.config.kind {
            OptimizerKind::SgdMomentum => {
                let momentum = self.config.momentum;
                let buf = &mut self.state.buffers[0];
                for ((p, g), b) in params.iter_mut().zip(grad).zip(buf.iter_mut()) {
                    let g = if wd != 0.0 { g + wd * *p } else { *g };
                    *b = momentum * *b + g;
                    *p -= lr * *b;
                }
            }
            OptimizerKind::Adamw => {
                let (beta1, beta2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
                let t = self.state.updates as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let (m, v) = self.state.buffers.split_at_mut(1);
                for (((p, g), m), v) in params.iter_mut().zip(grad).zip(m[0].iter_mut()).zip(v[0].iter_mut()) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                    if wd != 0.0 {
                        *p -= lr * wd * *p;
                    }
                    *p -= lr * update;
                }
            }
        }
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Architecture, Capacity};

    fn tiny_model() -> Model {
        Model::zeros(Architecture {
            input_dim: 1,
            capacity: Capacity {
                trunk_depth: 1,
                base_width: 1,
                width_multiplier: 1.0,
                head_depth: 0,
                shared_head_layers: 0,
            },
            head_outputs: vec![1],
            activation: Activation::Identity,
        })
        .unwrap()
    }

    #[test]
    fn sgd_single_step() {
        let mut m = tiny_model();
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1, 0.0, 1), m.param_count(), 1).unwrap();
        let g = vec![1.0; m.param_count()];
        opt.step(&mut m, &g, 0).unwrap();
        assert!(m.params().iter().all(|p| *p == -0.1));
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        for cfg in [OptimizerConfig::sgd(0.3, 0.9, 2), OptimizerConfig::adamw(0.01, 2)] {
            let mut m = tiny_model();
            m.set_params(&[0.3, -1.7, 2.5, 1e-3]).unwrap();
            let before = m.params().to_vec();
            let mut opt = Optimizer::new(cfg, m.param_count(), 1).unwrap();
            opt.step(&mut m, &[0.0; 4], 0).unwrap();
            assert_eq!(m.params(), &before[..]);
        }
    }

    #[test]
    fn adamw_first_step_closed_form() {
        let (b1, b2, eps, lr, g, p0) = (0.9f64, 0.999f64, 1e-8f64, 0.01, 0.37, 0.5);
        let mut m = tiny_model();
        m.set_params(&[p0, 0.0, 0.0, 0.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::adamw(lr, 1), 4, 1).unwrap();
        opt.step(&mut m, &[g, 0.0, 0.0, 0.0], 0).unwrap();
        let m_hat = (1.0 - b1) * g / (1.0 - b1);
        let v_hat = (1.0 - b2) * g * g / (1.0 - b2);
        let expected = p0 - lr * m_hat / (v_hat.sqrt() + eps);
        assert!((m.params()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_forms() {
        let mut cfg = OptimizerConfig::sgd(0.1, 0.0, 1);
        cfg.weight_decay = 0.5;
        let mut m = tiny_model();
        m.set_params(&[2.0, 0.0, 0.0, 0.0]).unwrap();
        let mut opt = Optimizer::new(cfg, 4, 1).unwrap();
        opt.step(&mut m, &[0.0; 4], 0).unwrap();
        // L2: theta - lr * wd * theta
        assert!((m.params()[0] - 1.9).abs() < 1e-15);

        let mut cfg = OptimizerConfig::adamw(0.1, 1);
        cfg.weight_decay = 0.5;
        let mut m = tiny_model();
        m.set_params(&[2.0, 0.0, 0.0, 0.0]).unwrap();
        let mut opt = Optimizer::new(cfg, 4, 1).unwrap();
        opt.step(&mut m, &[0.0; 4], 0).unwrap();
        assert!((m.params()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_mutation() {
        let mut m = tiny_model();
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1, 0.9, 1), 4, 1).unwrap();
        let err = opt.step(&mut m, &[0.0, f64::NAN, 0.0, 0.0], 0).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
        assert!(m.params().iter().all(|p| *p == 0.0));
        assert_eq!(opt.state().updates, 0);
    }

    #[test]
    fn schedules() {
        let mut cfg = OptimizerConfig::sgd(0.4, 0.0, 15);
        cfg.warmup_epochs = 5;
        cfg.schedule = Schedule::Cosine;
        let spe = 10;
        assert!((lr_at(&cfg, 0, spe) - 0.4 / 50.0).abs() < 1e-15);
        assert_eq!(lr_at(&cfg, 50, spe), 0.4);
        assert!((lr_at(&cfg, 100, spe) - 0.2).abs() < 1e-15);
        assert!(lr_at(&cfg, 150, spe).abs() < 1e-15);
        assert!(lr_at(&cfg, 400, spe).abs() < 1e-15);

        let cfg = OptimizerConfig::sgd(0.4, 0.0, 3);
        assert!((0..100).all(|s| lr_at(&cfg, s, 7) == 0.4));
    }

    #[test]
    fn config_validation() {
        let mut cfg = OptimizerConfig::sgd(0.1, 0.0, 3);
        cfg.warmup_epochs = 4;
        assert!(cfg.validate().is_err());
        assert!(OptimizerConfig::sgd(-0.1, 0.0, 3).validate().is_err());
        assert!(OptimizerConfig::sgd(0.1, 1.0, 3).validate().is_err());
    }
}
