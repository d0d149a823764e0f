//! Batch drawing.
//!
//! [`ResamplingSampler`] draws i.i.d. samples from the mixture
//! `q'(x, y) = sum_t 1[x in X_t] q_t(x, y) p_t`: pick source `t` with
//! probability `p_t`, then a row uniformly (with replacement) inside it.
//!
//! [`ReweighSampler`] draws one sub-batch per source for the reweighing
//! formulation. Each multi-domain source has its own random stream, so the
//! rows drawn for one source do not depend on which other sources are active.
//! Multi-task sources share input rows and therefore one stream.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Mode, MultiSourceDataset};
use crate::error::{Error, Result};
use crate::nn::{LossKind, Matrix};
use crate::rng::{self, RngState};
use crate::weighting::WeightVector;

/// Steps per epoch are defined by one reference source:
/// `ceil(|X_ref| / batch_size)`, independent of the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochConvention {
    pub reference_source: usize,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
}

impl EpochConvention {
    pub fn new(dataset: &MultiSourceDataset, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        let r = dataset.reference_source();
        Ok(Self {
            reference_source: r,
            batch_size,
            steps_per_epoch: dataset.source(r).len().div_ceil(batch_size),
        })
    }
}

/// Rows drawn for one source, materialized with the head and loss they train.
#[derive(Debug, Clone)]
pub struct TaskBatch {
    pub source: usize,
    pub head: usize,
    pub loss: LossKind,
    pub inputs: Matrix,
    pub targets: Matrix,
}

impl TaskBatch {
    pub fn gather(dataset: &MultiSourceDataset, source: usize, rows: &[usize]) -> Self {
        let s = dataset.source(source);
        Self {
            source,
            head: dataset.head_of(source),
            loss: dataset.task_of(source).loss,
            inputs: s.inputs.select_rows(rows),
            targets: s.targets.select_rows(rows),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A group of a mixed batch: all samples drawn from one source.
pub type SourceGroup = TaskBatch;

/// One sub-batch per source; `None` for sources that were not drawn.
/// `shared_inputs` is set when every present part holds the same input rows.
#[derive(Debug, Clone)]
pub struct ReweighBatch {
    pub parts: Vec<Option<TaskBatch>>,
    pub shared_inputs: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixedBatch {
    pub source_ids: Vec<usize>,
    pub rows: Vec<usize>,
}

impl MixedBatch {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn inputs(&self, dataset: &MultiSourceDataset) -> Matrix {
        let dim = dataset.feature_dim();
        let mut data = Vec::with_capacity(self.rows.len() * dim);
        for (&s, &r) in self.source_ids.iter().zip(&self.rows) {
            data.extend_from_slice(dataset.source(s).inputs.row(r));
        }
        Matrix::from_vec(self.rows.len(), dim, data).expect("consistent feature dim")
    }

    /// Samples grouped by source in increasing source order, keeping draw
    /// order inside each group.
    pub fn groups(&self, dataset: &MultiSourceDataset) -> Vec<SourceGroup> {
        let mut per_source: Vec<Vec<usize>> = vec![Vec::new(); dataset.source_count()];
        for (&s, &r) in self.source_ids.iter().zip(&self.rows) {
            per_source[s].push(r);
        }
        per_source
            .iter()
            .enumerate()
            .filter(|(_, rows)| !rows.is_empty())
            .map(|(s, rows)| TaskBatch::gather(dataset, s, rows))
            .collect()
    }
}

fn uniform_rows(rng: &mut ChaCha8Rng, n: usize, count: usize) -> Vec<usize> {
    (0..count).map(|_| rng.random_range(0..n)).collect()
}

#[derive(Debug, Clone)]
pub struct ResamplingSampler {
    weights: WeightVector,
    batch_size: usize,
    index: WeightedIndex<f64>,
    rng: ChaCha8Rng,
}

impl ResamplingSampler {
    pub fn new(weights: WeightVector, batch_size: usize, seed: u64) -> Result<Self> {
        Self::with_rng(weights, batch_size, rng::seeded(seed, 0xA11))
    }

    pub fn with_rng(weights: WeightVector, batch_size: usize, rng: ChaCha8Rng) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        let index = WeightedIndex::new(weights.as_slice()).map_err(|e| Error::InvalidWeights(e.to_string()))?;
        Ok(Self {
            weights,
            batch_size,
            index,
            rng,
        })
    }

    pub fn weights(&self) -> &WeightVector {
        &self.weights
    }

    pub fn set_weights(&mut self, weights: WeightVector) -> Result<()> {
        self.index = WeightedIndex::new(weights.as_slice()).map_err(|e| Error::InvalidWeights(e.to_string()))?;
        self.weights = weights;
        Ok(())
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    pub fn set_rng(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }

    pub fn next_batch(&mut self, dataset: &MultiSourceDataset) -> Result<MixedBatch> {
        if self.weights.len() != dataset.source_count() {
            return Err(Error::Dimension {
                context: "sampler weights",
                expected: dataset.source_count(),
                actual: self.weights.len(),
            });
        }
        let mut source_ids = Vec::with_capacity(self.batch_size);
        let mut rows = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            let t = self.index.sample(&mut self.rng);
            source_ids.push(t);
            rows.push(self.rng.random_range(0..dataset.source(t).len()));
        }
        Ok(MixedBatch { source_ids, rows })
    }
}

#[derive(Debug, Clone)]
pub struct ReweighSampler {
    batch_size: usize,
    streams: Vec<ChaCha8Rng>,
    shared: bool,
}

impl ReweighSampler {
    pub fn new(dataset: &MultiSourceDataset, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        let shared = dataset.mode() == Mode::MultiTask;
        let n_streams = if shared { 1 } else { dataset.source_count() };
        Ok(Self {
            batch_size,
            streams: (0..n_streams).map(|t| rng::seeded(seed, 0xB00 + t as u64)).collect(),
            shared,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn rng_states(&self) -> Vec<RngState> {
        self.streams.iter().map(RngState::capture).collect()
    }

    pub fn set_rngs(&mut self, streams: Vec<ChaCha8Rng>) -> Result<()> {
        if streams.len() != self.streams.len() {
            return Err(Error::Checkpoint("sampler stream count mismatch".into()));
        }
        self.streams = streams;
        Ok(())
    }

    /// Draws `batch_size` rows for source `t` only.
    pub fn next_source_batch(&mut self, dataset: &MultiSourceDataset, t: usize) -> TaskBatch {
        let stream = if self.shared { 0 } else { t };
        let rows = uniform_rows(&mut self.streams[stream], dataset.source(t).len(), self.batch_size);
        TaskBatch::gather(dataset, t, &rows)
    }

    /// Draws a sub-batch for every source with `active[t]`.
    pub fn next_batch(&mut self, dataset: &MultiSourceDataset, active: &[bool]) -> Result<ReweighBatch> {
        if active.len() != dataset.source_count() {
            return Err(Error::Dimension {
                context: "active source mask",
                expected: dataset.source_count(),
                actual: active.len(),
            });
        }
        if self.shared {
            if !active.iter().any(|a| *a) {
                return Ok(ReweighBatch {
                    parts: vec![None; active.len()],
                    shared_inputs: true,
                });
            }
            let rows = uniform_rows(&mut self.streams[0], dataset.source(0).len(), self.batch_size);
            let parts = active
                .iter()
                .enumerate()
                .map(|(t, &a)| a.then(|| TaskBatch::gather(dataset, t, &rows)))
                .collect();
            return Ok(ReweighBatch {
                parts,
                shared_inputs: true,
            });
        }
        let parts = active
            .iter()
            .enumerate()
            .map(|(t, &a)| a.then(|| self.next_source_batch(dataset, t)))
            .collect();
        Ok(ReweighBatch {
            parts,
            shared_inputs: false,
        })
    }
}
