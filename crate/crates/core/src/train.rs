//! Training runs: one model, one optimizer, the sampling streams, and the
//! per-step update of the configured method.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conflict::ConflictProfiler;
use crate::data::{EpochConvention, MultiSourceDataset, ReweighBatch, ReweighSampler, ResamplingSampler};
use crate::error::{Error, Result};
use crate::grad_mto::{cagrad_combine, graddrop_combine, pcgrad_combine, per_task_gradients, CagradConfig, GradientSet};
use crate::nn::{loss_and_grad, metric, Activation, Architecture, Capacity, Model, Optimizer, OptimizerConfig, OptimizerState};
use crate::rng::{self, RngState};
use crate::weighting::{
    resample_gradient, weighted_gradient, AdaptiveLossState, AdaptiveMethod, ScalarizationMode, WeightVector,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Method {
    Scalarization {
        #[serde(default = "default_mode")]
        mode: ScalarizationMode,
    },
    Uncertainty {
        #[serde(default = "default_s_lr")]
        s_learning_rate: f64,
    },
    ImtlL {
        #[serde(default = "default_s_lr")]
        s_learning_rate: f64,
    },
    Pcgrad {},
    Graddrop {},
    Cagrad {
        #[serde(default = "default_c")]
        c: f64,
        #[serde(default = "default_inner_iters")]
        inner_iters: usize,
        #[serde(default = "default_inner_lr")]
        inner_lr: f64,
    },
}

fn default_c() -> f64 {
    CagradConfig::default().c
}

fn default_inner_iters() -> usize {
    CagradConfig::default().inner_iters
}

fn default_inner_lr() -> f64 {
    CagradConfig::default().inner_lr
}

fn default_mode() -> ScalarizationMode {
    ScalarizationMode::Reweigh
}

fn default_s_lr() -> f64 {
    crate::weighting::DEFAULT_S_LEARNING_RATE
}

impl Method {
    pub fn scalarization() -> Self {
        Method::Scalarization { mode: ScalarizationMode::Reweigh }
    }

    pub fn cagrad(config: CagradConfig) -> Self {
        Method::Cagrad {
            c: config.c,
            inner_iters: config.inner_iters,
            inner_lr: config.inner_lr,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Scalarization { .. } => "scalarization",
            Method::Uncertainty { .. } => "uncertainty",
            Method::ImtlL { .. } => "imtl-l",
            Method::Pcgrad {} => "pcgrad",
            Method::Graddrop {} => "graddrop",
            Method::Cagrad { .. } => "cagrad",
        }
    }

    /// Methods that manipulate per-task gradients and therefore need one
    /// backward pass per task.
    pub fn is_gradient_based(&self) -> bool {
        matches!(self, Method::Pcgrad {} | Method::Graddrop {} | Method::Cagrad { .. })
    }

    /// Whether the update uses the weight vector `p`.
    pub fn uses_weights(&self) -> bool {
        matches!(self, Method::Scalarization { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub capacity: Capacity,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub method: Method,
    pub seed: u64,
    /// Micro-batches averaged into one step; gradient-based methods combine
    /// the accumulated per-task gradients.
    #[serde(default = "one")]
    pub accumulation: usize,
    /// Record gradient conflicts every `stride` steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile_stride: Option<usize>,
}

fn default_activation() -> Activation {
    Activation::Relu
}

fn one() -> usize {
    1
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.capacity.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.accumulation == 0 {
            return Err(Error::config("accumulation must be positive"));
        }
        if self.profile_stride == Some(0) {
            return Err(Error::config("profile_stride must be positive"));
        }
        match self.method {
            Method::Uncertainty { s_learning_rate } | Method::ImtlL { s_learning_rate }
                if !(s_learning_rate.is_finite() && s_learning_rate > 0.0) =>
            {
                Err(Error::config("s_learning_rate must be positive"))
            }
            Method::Cagrad { c, inner_lr, .. } if !(c >= 0.0 && inner_lr > 0.0) => {
                Err(Error::config("cagrad needs c >= 0 and inner_lr > 0"))
            }
            _ => Ok(()),
        }
    }

    pub fn architecture(&self, dataset: &MultiSourceDataset) -> Architecture {
        Architecture {
            input_dim: dataset.feature_dim(),
            capacity: self.capacity.clone(),
            head_outputs: dataset.head_outputs(),
            activation: self.activation,
        }
    }

    pub fn model_seed(&self) -> u64 {
        rng::derive_seed(self.seed, 1)
    }

    pub fn data_seed(&self) -> u64 {
        rng::derive_seed(self.seed, 2)
    }
}

/// Piecewise-constant weights: entry `(start_epoch, p)` is in force from
/// `start_epoch` until the next entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSchedule {
    pub entries: Vec<(usize, WeightVector)>,
}

impl WeightSchedule {
    pub fn constant(p: WeightVector) -> Self {
        Self { entries: vec![(0, p)] }
    }

    pub fn new(entries: Vec<(usize, WeightVector)>) -> Result<Self> {
        if entries.first().map(|e| e.0) != Some(0) {
            return Err(Error::config("weight schedule must start at epoch 0"));
        }
        if entries.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::config("weight schedule epochs must be strictly increasing"));
        }
        let t = entries[0].1.len();
        if entries.iter().any(|e| e.1.len() != t) {
            return Err(Error::config("weight schedule entries disagree on the task count"));
        }
        Ok(Self { entries })
    }

    pub fn weights_at(&self, epoch: usize) -> &WeightVector {
        let k = self.entries.partition_point(|e| e.0 <= epoch);
        &self.entries[k - 1].1
    }

    /// Epoch ranges `[start, end)` covering `[0, total)`.
    pub fn ranges(&self, total: usize) -> Vec<(usize, usize, &WeightVector)> {
        let mut out = Vec::new();
        for (k, (start, p)) in self.entries.iter().enumerate() {
            let end = self.entries.get(k + 1).map(|e| e.0).unwrap_or(total).min(total);
            if *start < end {
                out.push((*start, end, p));
            }
        }
        out
    }

    /// Rescales boundaries from a run of `from` epochs to one of `to` epochs,
    /// rounding to the nearest epoch; entries that collapse onto the same
    /// epoch keep the later one.
    pub fn stretch(&self, from: usize, to: usize) -> Result<Self> {
        if from == 0 || to == 0 {
            return Err(Error::config("cannot stretch to or from zero epochs"));
        }
        let mut entries: Vec<(usize, WeightVector)> = Vec::new();
        for (start, p) in &self.entries {
            let s = ((*start as f64) * to as f64 / from as f64).round() as usize;
            if s >= to && s > 0 {
                continue;
            }
            match entries.last_mut() {
                Some(last) if last.0 == s => last.1 = p.clone(),
                _ => entries.push((s, p.clone())),
            }
        }
        Self::new(entries)
    }
}

/// Weights in force from `step` on (recorded when they change, and at every
/// step for loss-based methods).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightLogEntry {
    pub step: usize,
    pub epoch: usize,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    /// Mean training loss per source over the steps where it was computed.
    pub losses: Vec<Option<f64>>,
}

/// Complete mutable state of a session, sufficient to resume bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub params: Vec<f64>,
    pub optimizer: OptimizerState,
    pub epoch: usize,
    pub step: usize,
    pub reweigh_rngs: Vec<RngState>,
    pub resample_rng: RngState,
    pub mto_rng: RngState,
    pub adaptive_s: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct TrainingSession {
    config: TrainConfig,
    model: Model,
    optimizer: Optimizer,
    convention: EpochConvention,
    reweigh: ReweighSampler,
    resample: ResamplingSampler,
    mto_rng: ChaCha8Rng,
    adaptive: Option<AdaptiveLossState>,
    epoch: usize,
    step: usize,
    profiler: Option<(ConflictProfiler, ReweighSampler)>,
    weight_log: Vec<WeightLogEntry>,
}

impl TrainingSession {
    pub fn new(dataset: &MultiSourceDataset, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.architecture(dataset), config.model_seed())?;
        let convention = EpochConvention::new(dataset, config.batch_size)?;
        let optimizer = Optimizer::new(config.optimizer.clone(), model.param_count(), convention.steps_per_epoch)?;
        let data_seed = config.data_seed();
        let t = dataset.source_count();
        let adaptive = match config.method {
            Method::Uncertainty { s_learning_rate } => Some(AdaptiveLossState {
                learning_rate: s_learning_rate,
                ..AdaptiveLossState::new(AdaptiveMethod::Uncertainty, t)
            }),
            Method::ImtlL { s_learning_rate } => Some(AdaptiveLossState {
                learning_rate: s_learning_rate,
                ..AdaptiveLossState::new(AdaptiveMethod::ImtlL, t)
            }),
            _ => None,
        };
        let profiler = match config.profile_stride {
            Some(stride) => Some((
                ConflictProfiler::new(stride)?,
                ReweighSampler::new(dataset, config.batch_size, rng::derive_seed(config.seed, 0x9F0F))?,
            )),
            None => None,
        };
        Ok(Self {
            config: config.clone(),
            model,
            optimizer,
            convention,
            reweigh: ReweighSampler::new(dataset, config.batch_size, data_seed)?,
            resample: ResamplingSampler::new(WeightVector::uniform(t), config.batch_size, data_seed)?,
            mto_rng: rng::seeded(config.seed, 3),
            adaptive,
            epoch: 0,
            step: 0,
            profiler,
            weight_log: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.convention.steps_per_epoch
    }

    pub fn weight_log(&self) -> &[WeightLogEntry] {
        &self.weight_log
    }

    pub fn adaptive_state(&self) -> Option<&AdaptiveLossState> {
        self.adaptive.as_ref()
    }

    pub fn profiler(&self) -> Option<&ConflictProfiler> {
        self.profiler.as_ref().map(|(p, _)| p)
    }

    fn log_weights(&mut self, weights: &[f64], always: bool) {
        if always || self.weight_log.last().map(|e| e.weights.as_slice()) != Some(weights) {
            self.weight_log.push(WeightLogEntry {
                step: self.step,
                epoch: self.epoch,
                weights: weights.to_vec(),
            });
        }
    }

    /// Trains one epoch (`steps_per_epoch` updates). `weights` is used by
    /// scalarization and ignored by the other methods.
    pub fn run_epoch(&mut self, dataset: &MultiSourceDataset, weights: &WeightVector) -> Result<EpochStats> {
        if weights.len() != dataset.source_count() {
            return Err(Error::Dimension {
                context: "weight vector",
                expected: dataset.source_count(),
                actual: weights.len(),
            });
        }
        let t = dataset.source_count();
        let mut sums = vec![0.0; t];
        let mut counts = vec![0usize; t];
        let steps = self.convention.steps_per_epoch;
        for k in 0..steps {
            let losses = self.train_step(dataset, weights)?;
            for (s, l) in losses.iter().enumerate() {
                if let Some(l) = l {
                    sums[s] += l;
                    counts[s] += 1;
                }
            }
            if let Some((profiler, sampler)) = self.profiler.as_mut() {
                if profiler.wants(k) {
                    let batch = sampler.next_batch(dataset, &vec![true; t])?;
                    profiler.observe(&per_task_gradients(&self.model, &batch)?);
                }
            }
        }
        if let Some((profiler, _)) = self.profiler.as_mut() {
            profiler.finish_epoch(self.epoch)?;
        }
        let stats = EpochStats {
            epoch: self.epoch,
            steps,
            losses: sums
                .iter()
                .zip(&counts)
                .map(|(s, c)| (*c > 0).then(|| s / *c as f64))
                .collect(),
        };
        self.epoch += 1;
        Ok(stats)
    }

    fn train_step(&mut self, dataset: &MultiSourceDataset, weights: &WeightVector) -> Result<Vec<Option<f64>>> {
        let t = dataset.source_count();
        let k = self.config.accumulation;
        let all = vec![true; t];
        let (grad, losses) = match self.config.method {
            Method::Scalarization { mode } => {
                self.log_weights(weights.as_slice(), false);
                let mut acc = Accumulator::new(k);
                for _ in 0..k {
                    let (g, l) = match mode {
                        ScalarizationMode::Reweigh => {
                            let batch = self.reweigh.next_batch(dataset, &weights.active())?;
                            weighted_gradient(&self.model, &batch, weights.as_slice())?
                        }
                        ScalarizationMode::Resample => {
                            if self.resample.weights() != weights {
                                self.resample.set_weights(weights.clone())?;
                            }
                            let groups = self.resample.next_batch(dataset)?.groups(dataset);
                            resample_gradient(&self.model, &groups, t)?
                        }
                    };
                    acc.add(g, l);
                }
                acc.finish()
            }
            Method::Uncertainty { .. } | Method::ImtlL { .. } => {
                let state = self.adaptive.as_ref().expect("adaptive state exists");
                let coeffs = state.loss_coefficients();
                let implied = state.implied_weights()?;
                self.log_weights(implied.as_slice(), true);
                let mut acc = Accumulator::new(k);
                for _ in 0..k {
                    let batch = self.reweigh.next_batch(dataset, &all)?;
                    let (g, l) = weighted_gradient(&self.model, &batch, &coeffs)?;
                    acc.add(g, l);
                }
                acc.finish()
            }
            Method::Pcgrad {} | Method::Graddrop {} | Method::Cagrad { .. } => {
                let mut sets = Vec::with_capacity(k);
                for _ in 0..k {
                    let batch: ReweighBatch = self.reweigh.next_batch(dataset, &all)?;
                    sets.push(per_task_gradients(&self.model, &batch)?);
                }
                let set = if k == 1 { sets.pop().expect("one set") } else { GradientSet::accumulate(&sets)? };
                let n = set.len() as f64;
                let grad = match self.config.method {
                    Method::Pcgrad {} => scale(pcgrad_combine(&set, &mut self.mto_rng), 1.0 / n),
                    Method::Graddrop {} => scale(graddrop_combine(&set, &mut self.mto_rng), 1.0 / n),
                    Method::Cagrad { c, inner_iters, inner_lr } => {
                        cagrad_combine(&set, &CagradConfig { c, inner_iters, inner_lr }).direction
                    }
                    _ => unreachable!(),
                };
                let mut losses = vec![None; t];
                for (id, l) in set.task_ids.iter().zip(&set.losses) {
                    losses[*id] = Some(*l);
                }
                (grad, losses)
            }
        };
        self.optimizer.step(&mut self.model, &grad, self.step)?;
        if let Some(state) = self.adaptive.as_mut() {
            let l: Vec<f64> = losses.iter().map(|l| l.unwrap_or(0.0)).collect();
            let (_, gs) = state.total_and_grad(&l)?;
            state.update(&gs)?;
        }
        self.step += 1;
        Ok(losses)
    }

    /// Trains until `epochs` epochs have completed under `schedule`.
    pub fn train(&mut self, dataset: &MultiSourceDataset, schedule: &WeightSchedule, epochs: usize) -> Result<Vec<EpochStats>> {
        let mut out = Vec::new();
        while self.epoch < epochs {
            let p = schedule.weights_at(self.epoch).clone();
            out.push(self.run_epoch(dataset, &p)?);
        }
        Ok(out)
    }

    pub fn state(&self) -> SessionState {
        SessionState {
            params: self.model.params().to_vec(),
            optimizer: self.optimizer.state().clone(),
            epoch: self.epoch,
            step: self.step,
            reweigh_rngs: self.reweigh.rng_states(),
            resample_rng: self.resample.rng_state(),
            mto_rng: RngState::capture(&self.mto_rng),
            adaptive_s: self.adaptive.as_ref().map(|a| a.s.clone()),
        }
    }

    pub fn restore(&mut self, state: &SessionState) -> Result<()> {
        let reweigh = state.reweigh_rngs.iter().map(RngState::restore).collect::<Result<Vec<_>>>()?;
        let resample = state.resample_rng.restore()?;
        let mto = state.mto_rng.restore()?;
        match (self.adaptive.as_mut(), &state.adaptive_s) {
            (Some(a), Some(s)) if s.len() == a.s.len() => a.s = s.clone(),
            (None, None) => {}
            _ => return Err(Error::Checkpoint("adaptive-loss state does not match the method".into())),
        }
        self.model.set_params(&state.params)?;
        self.optimizer.set_state(state.optimizer.clone())?;
        self.reweigh.set_rngs(reweigh)?;
        self.resample.set_rng(resample);
        self.mto_rng = mto;
        self.epoch = state.epoch;
        self.step = state.step;
        Ok(())
    }

    /// Gives the data and method streams fresh, independent positions.
    pub fn reseed_streams(&mut self, dataset: &MultiSourceDataset, seed: u64) -> Result<()> {
        self.reweigh = ReweighSampler::new(dataset, self.config.batch_size, rng::derive_seed(seed, 2))?;
        self.resample = ResamplingSampler::new(
            self.resample.weights().clone(),
            self.config.batch_size,
            rng::derive_seed(seed, 2),
        )?;
        self.mto_rng = rng::seeded(seed, 3);
        Ok(())
    }
}

fn scale(mut v: Vec<f64>, k: f64) -> Vec<f64> {
    v.iter_mut().for_each(|x| *x *= k);
    v
}

/// Averages gradients and losses over micro-batches; a single micro-batch
/// passes through untouched.
struct Accumulator {
    k: usize,
    grad: Option<Vec<f64>>,
    losses: Vec<(f64, usize)>,
}

impl Accumulator {
    fn new(k: usize) -> Self {
        Self {
            k,
            grad: None,
            losses: Vec::new(),
        }
    }

    fn add(&mut self, g: Vec<f64>, l: Vec<Option<f64>>) {
        match self.grad.as_mut() {
            None => self.grad = Some(g),
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        }
        if self.losses.is_empty() {
            self.losses = vec![(0.0, 0); l.len()];
        }
        for (acc, v) in self.losses.iter_mut().zip(l) {
            if let Some(v) = v {
                acc.0 += v;
                acc.1 += 1;
            }
        }
    }

    fn finish(self) -> (Vec<f64>, Vec<Option<f64>>) {
        let mut g = self.grad.expect("at least one micro-batch");
        if self.k > 1 {
            g.iter_mut().for_each(|v| *v /= self.k as f64);
        }
        let l = self
            .losses
            .into_iter()
            .map(|(s, n)| (n > 0).then(|| if n == 1 { s } else { s / n as f64 }))
            .collect();
        (g, l)
    }
}

/// Trains on source `t` alone: the single-dataset baseline. Uses the same
/// model seed, data stream and step count as a joint run with `p = e_t`.
pub fn train_single_source(dataset: &MultiSourceDataset, t: usize, config: &TrainConfig, epochs: usize) -> Result<Model> {
    config.validate()?;
    if t >= dataset.source_count() {
        return Err(Error::config(format!("source {t} out of range")));
    }
    let mut model = Model::new(config.architecture(dataset), config.model_seed())?;
    let convention = EpochConvention::new(dataset, config.batch_size)?;
    let mut optimizer = Optimizer::new(config.optimizer.clone(), model.param_count(), convention.steps_per_epoch)?;
    let mut sampler = ReweighSampler::new(dataset, config.batch_size, config.data_seed())?;
    let mut step = 0;
    for _ in 0..epochs {
        for _ in 0..convention.steps_per_epoch {
            let batch = sampler.next_source_batch(dataset, t);
            let (out, tape) = model.forward(&batch.inputs, batch.head)?;
            let (_, lg) = loss_and_grad(batch.loss, &out, &batch.targets)?;
            let grad = model.backward(&tape, &lg)?;
            optimizer.step(&mut model, &grad, step)?;
            step += 1;
        }
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceMetric {
    pub source: String,
    pub task: String,
    pub metric: String,
    pub value: f64,
    /// Larger-is-better version of `value`.
    pub oriented: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_source: Vec<SourceMetric>,
    /// Unweighted mean of the oriented per-source metrics.
    pub mean_oriented: f64,
}

impl Evaluation {
    pub fn values(&self) -> Vec<f64> {
        self.per_source.iter().map(|m| m.value).collect()
    }

    pub fn oriented(&self) -> Vec<f64> {
        self.per_source.iter().map(|m| m.oriented).collect()
    }
}

/// Metric and loss of `model` on every source of `dataset`.
pub fn evaluate(model: &Model, dataset: &MultiSourceDataset) -> Result<Evaluation> {
    let mut per_source = Vec::with_capacity(dataset.source_count());
    for (t, s) in dataset.sources().iter().enumerate() {
        let task = dataset.task_of(t);
        let out = model.predict(&s.inputs, dataset.head_of(t))?;
        let kind = task.metric();
        let value = metric(kind, &out, &s.targets)?;
        let (loss, _) = loss_and_grad(task.loss, &out, &s.targets)?;
        per_source.push(SourceMetric {
            source: s.name.clone(),
            task: task.name.clone(),
            metric: kind.name().to_string(),
            value,
            oriented: kind.oriented(value),
            loss,
        });
    }
    let mean_oriented = per_source.iter().map(|m| m.oriented).sum::<f64>() / per_source.len() as f64;
    Ok(Evaluation { per_source, mean_oriented })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_multidomain, gen_multitask, MultiDomainConfig, MultiTaskConfig};

    fn config(method: Method) -> TrainConfig {
        TrainConfig {
            capacity: Capacity {
                trunk_depth: 1,
                base_width: 8,
                width_multiplier: 1.0,
                head_depth: 1,
                shared_head_layers: 0,
            },
            activation: Activation::Relu,
            optimizer: OptimizerConfig::sgd(0.05, 0.9, 4),
            batch_size: 16,
            method,
            seed: 11,
            accumulation: 1,
            profile_stride: None,
        }
    }

    fn mdl() -> MultiSourceDataset {
        gen_multidomain(&MultiDomainConfig {
            n_per_source: vec![64, 48],
            domain_shift: 1.0,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn every_method_trains() {
        let ds = gen_multitask(&MultiTaskConfig {
            task_count: 3,
            n: 64,
            ..Default::default()
        })
        .unwrap();
        for m in [
            Method::scalarization(),
            Method::Scalarization { mode: ScalarizationMode::Resample },
            Method::Uncertainty { s_learning_rate: 0.025 },
            Method::ImtlL { s_learning_rate: 0.025 },
            Method::Pcgrad {},
            Method::Graddrop {},
            Method::cagrad(CagradConfig::default()),
        ] {
            let mut s = TrainingSession::new(&ds, &config(m)).unwrap();
            let before = evaluate(s.model(), &ds).unwrap().per_source[0].loss;
            s.train(&ds, &WeightSchedule::constant(WeightVector::uniform(3)), 4).unwrap();
            let after = evaluate(s.model(), &ds).unwrap().per_source[0].loss;
            assert!(after < before, "{} did not reduce the loss", m.name());
        }
    }

    #[test]
    fn vertex_matches_single_source() {
        let ds = mdl();
        let cfg = config(Method::scalarization());
        let mut s = TrainingSession::new(&ds, &cfg).unwrap();
        s.train(&ds, &WeightSchedule::constant(WeightVector::vertex(2, 1)), 3).unwrap();
        let sd = train_single_source(&ds, 1, &cfg, 3).unwrap();
        assert_eq!(s.model().params(), sd.params());
    }

    #[test]
    fn state_round_trip_resumes_exactly() {
        let ds = mdl();
        let cfg = config(Method::Pcgrad {});
        let p = WeightSchedule::constant(WeightVector::uniform(2));
        let mut a = TrainingSession::new(&ds, &cfg).unwrap();
        a.train(&ds, &p, 2).unwrap();
        let st = a.state();
        a.train(&ds, &p, 4).unwrap();
        let mut b = TrainingSession::new(&ds, &cfg).unwrap();
        b.restore(&st).unwrap();
        b.train(&ds, &p, 4).unwrap();
        assert_eq!(a.model().params(), b.model().params());
    }

    #[test]
    fn schedule_lookup_and_stretch() {
        let s = WeightSchedule::new(vec![(0, WeightVector::pair(0.2).unwrap()), (10, WeightVector::pair(0.7).unwrap())]).unwrap();
        assert_eq!(s.weights_at(9).get(0), 0.2);
        assert_eq!(s.weights_at(10).get(0), 0.7);
        let r = s.ranges(20);
        assert_eq!((r[0].0, r[0].1, r[1].0, r[1].1), (0, 10, 10, 20));
        let st = s.stretch(20, 40).unwrap();
        assert_eq!(st.entries[1].0, 20);
        assert!(WeightSchedule::new(vec![(1, WeightVector::uniform(2))]).is_err());
    }

    #[test]
    fn weight_change_is_logged_at_the_boundary_step() {
        let ds = mdl();
        let mut s = TrainingSession::new(&ds, &config(Method::scalarization())).unwrap();
        let sched = WeightSchedule::new(vec![(0, WeightVector::pair(0.2).unwrap()), (2, WeightVector::pair(0.7).unwrap())]).unwrap();
        s.train(&ds, &sched, 3).unwrap();
        let log = s.weight_log();
        assert_eq!(log.len(), 2);
        assert_eq!(log[1].epoch, 2);
        assert_eq!(log[1].step, 2 * s.steps_per_epoch());
    }

    #[test]
    fn method_config_parses() {
        let m: Method = serde_json::from_str(r#"{"name":"cagrad","c":0.5}"#).unwrap();
        assert_eq!(m, Method::cagrad(CagradConfig { c: 0.5, ..Default::default() }));
        let m: Method = serde_json::from_str(r#"{"name":"scalarization"}"#).unwrap();
        assert_eq!(m, Method::scalarization());
        assert!(serde_json::from_str::<Method>(r#"{"name":"pcgrad","x":1}"#).is_err());
    }
}
