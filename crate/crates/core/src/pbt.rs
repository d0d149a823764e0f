//! Population-based search over scalarization weights.
//!
//! `N` members train in synchronous generations of `E_ready` epochs. At each
//! sync every live member is scored on a holdout split; the bottom `ceil(QN)`
//! members load the checkpoint of a uniformly drawn member of the top
//! `ceil(QN)` and perturb its weights. The best member's weight history is
//! then backtracked through the exploit chain into a schedule for retraining.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::MultiSourceDataset;
use crate::error::{Error, Result};
use crate::nn::OptimizerState;
use crate::rng::{self, RngState};
use crate::train::{evaluate, Evaluation, SessionState, TrainConfig, TrainingSession, WeightSchedule};
use crate::weighting::{simplex_project, WeightVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PbtConfig {
    pub population: usize,
    pub ready_epochs: usize,
    pub quantile: f64,
    pub total_epochs: usize,
    pub perturb_factors: (f64, f64),
    pub resample_probability: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for PbtConfig {
    fn default() -> Self {
        Self {
            population: 12,
            ready_epochs: 5,
            quantile: 0.25,
            total_epochs: 30,
            perturb_factors: (0.8, 1.25),
            resample_probability: 0.25,
            holdout_fraction: 0.3,
            seed: 0,
        }
    }
}

/// Range of the uniform redraw used by [`explore`].
pub const RESAMPLE_RANGE: (f64, f64) = (0.1, 1.0);

impl PbtConfig {
    /// `ceil(Q N)`, robust to `Q N` landing a rounding error above an integer.
    pub fn replaced_count(&self) -> usize {
        replaced_count(self.quantile, self.population)
    }

    pub fn validate(&self) -> Result<()> {
        if self.population == 0 {
            return Err(Error::config("population must be positive"));
        }
        if !(self.quantile > 0.0 && self.quantile <= 0.5) {
            return Err(Error::config("quantile must be in (0, 0.5]"));
        }
        let r = self.replaced_count();
        if 2 * r > self.population {
            return Err(Error::config(format!(
                "population {} is too small: the top and bottom {r} members would overlap",
                self.population
            )));
        }
        if self.ready_epochs == 0 || self.ready_epochs > self.total_epochs {
            return Err(Error::config("need 0 < ready_epochs <= total_epochs"));
        }
        let (lo, hi) = self.perturb_factors;
        if !(lo > 0.0 && lo < 1.0 && hi > 1.0 && hi.is_finite()) {
            return Err(Error::config("perturb_factors must satisfy 0 < low < 1 < high"));
        }
        if !(0.0..=1.0).contains(&self.resample_probability) {
            return Err(Error::config("resample_probability must be in [0, 1]"));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::config("holdout_fraction must be in (0, 1)"));
        }
        Ok(())
    }

    /// Upper bound `N (1 + Q E_total / E_ready)` on explored configurations.
    pub fn explored_bound(&self) -> f64 {
        self.population as f64 * (1.0 + self.quantile * self.total_epochs as f64 / self.ready_epochs as f64)
    }

    /// Epochs at which members are scored; the last one only ranks.
    pub fn sync_epochs(&self) -> Vec<usize> {
        let mut v: Vec<usize> = (1..)
            .map(|k| k * self.ready_epochs)
            .take_while(|e| *e < self.total_epochs)
            .collect();
        v.push(self.total_epochs);
        v
    }
}

fn replaced_count(quantile: f64, n: usize) -> usize {
    ((quantile * n as f64) - 1e-9).ceil().max(0.0) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum HistoryEvent {
    Init,
    /// Copied member `source`; the explore draw left the weights unchanged.
    ExploitCopy { source: usize },
    /// Copied member `source` and perturbed its weights.
    ExplorePerturb { source: usize },
}

impl HistoryEvent {
    pub fn source(&self) -> Option<usize> {
        match self {
            HistoryEvent::Init => None,
            HistoryEvent::ExploitCopy { source } | HistoryEvent::ExplorePerturb { source } => Some(*source),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub epoch: usize,
    pub weights: WeightVector,
    pub event: HistoryEvent,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopulationMember {
    pub id: usize,
    pub weights: WeightVector,
    pub history: Vec<HistoryEntry>,
    pub score: Option<f64>,
    pub task_scores: Vec<f64>,
    pub alive: bool,
    pub failure: Option<String>,
    /// Latest checkpoint, taken at the last sync.
    #[serde(skip)]
    pub checkpoint: Vec<u8>,
}

/// One redraw decision of [`explore`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Perturbation {
    Resample(f64),
    Scale(f64),
}

/// Applies per-coordinate perturbations and re-projects onto the simplex.
pub fn apply_perturbations(weights: &WeightVector, draws: &[Perturbation]) -> Result<WeightVector> {
    if draws.len() != weights.len() {
        return Err(Error::Dimension {
            context: "perturbations",
            expected: weights.len(),
            actual: draws.len(),
        });
    }
    let raw: Vec<f64> = weights
        .as_slice()
        .iter()
        .zip(draws)
        .map(|(p, d)| match d {
            Perturbation::Resample(v) => *v,
            Perturbation::Scale(f) => p * f,
        })
        .collect();
    simplex_project(&raw)
}

/// Each coordinate is redrawn from `U(0.1, 1.0)` with probability
/// `resample_probability`, otherwise multiplied by one of the two perturb
/// factors chosen uniformly; the result is normalized.
pub fn explore<R: Rng + ?Sized>(weights: &WeightVector, rng: &mut R, config: &PbtConfig) -> Result<WeightVector> {
    let draws: Vec<Perturbation> = (0..weights.len())
        .map(|_| {
            if rng.random::<f64>() < config.resample_probability {
                Perturbation::Resample(rng.random_range(RESAMPLE_RANGE.0..RESAMPLE_RANGE.1))
            } else if rng.random_bool(0.5) {
                Perturbation::Scale(config.perturb_factors.0)
            } else {
                Perturbation::Scale(config.perturb_factors.1)
            }
        })
        .collect();
    apply_perturbations(weights, &draws)
}

/// Uniform point on the simplex (Dirichlet(1, ..., 1)).
pub fn sample_uniform_simplex<R: Rng + ?Sized>(t: usize, rng: &mut R) -> WeightVector {
    loop {
        let raw: Vec<f64> = (0..t).map(|_| Exp1.sample(rng)).collect();
        if let Ok(w) = simplex_project(&raw) {
            return w;
        }
    }
}

/// Orders member ids best first: higher score, then lower id.
pub fn rank(scores: &[(usize, f64)]) -> Vec<usize> {
    let mut v = scores.to_vec();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().map(|(id, _)| id).collect()
}

/// `(loser, winner)` pairs: the bottom `ceil(QN)` ranked members each copy a
/// member drawn uniformly (with replacement) from the top `ceil(QN)`.
pub fn exploit<R: Rng + ?Sized>(scores: &[(usize, f64)], quantile: f64, rng: &mut R) -> Vec<(usize, usize)> {
    let order = rank(scores);
    let r = replaced_count(quantile, order.len());
    if r == 0 || 2 * r > order.len() {
        return Vec::new();
    }
    let top = &order[..r];
    order[order.len() - r..]
        .iter()
        .map(|&loser| (loser, top[rng.random_range(0..r)]))
        .collect()
}

/// Follows exploit copies back from `best` and concatenates the weights that
/// were in force over each epoch interval of `[0, total_epochs)`.
pub fn backtrack_policy(best: usize, members: &[PopulationMember]) -> Result<WeightSchedule> {
    let find = |id: usize| {
        members
            .iter()
            .find(|m| m.id == id)
            .ok_or_else(|| Error::BrokenChain(format!("member {id} does not exist")))
    };
    let mut segments: Vec<(usize, WeightVector)> = Vec::new();
    let mut current = find(best)?;
    let mut end = usize::MAX;
    'chain: loop {
        for entry in current.history.iter().rev().filter(|e| e.epoch < end) {
            segments.push((entry.epoch, entry.weights.clone()));
            match entry.event.source() {
                None if entry.epoch == 0 => break 'chain,
                None => {
                    return Err(Error::BrokenChain(format!(
                        "member {} starts at epoch {} instead of 0",
                        current.id, entry.epoch
                    )))
                }
                Some(src) => {
                    end = entry.epoch;
                    current = find(src)?;
                    continue 'chain;
                }
            }
        }
        return Err(Error::BrokenChain(format!(
            "member {} has no history before epoch {end}",
            current.id
        )));
    }
    segments.reverse();
    WeightSchedule::new(segments)
}

const MAGIC: &[u8; 4] = b"SCWT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    member_id: usize,
    epoch: usize,
    step: usize,
    weights: WeightVector,
    scores: Vec<f64>,
    param_count: usize,
    optimizer_updates: u64,
    optimizer_buffers: usize,
    reweigh_rngs: Vec<RngState>,
    resample_rng: RngState,
    mto_rng: RngState,
    adaptive_s: Option<Vec<f64>>,
}

/// Member state written as `"SCWT"`, a little-endian `u32` version, a
/// little-endian `u64` metadata length, JSON metadata, then parameters and
/// optimizer buffers as little-endian `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub member_id: usize,
    pub weights: WeightVector,
    pub scores: Vec<f64>,
    pub state: SessionState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let s = &self.state;
        let meta = CheckpointMeta {
            member_id: self.member_id,
            epoch: s.epoch,
            step: s.step,
            weights: self.weights.clone(),
            scores: self.scores.clone(),
            param_count: s.params.len(),
            optimizer_updates: s.optimizer.updates,
            optimizer_buffers: s.optimizer.buffers.len(),
            reweigh_rngs: s.reweigh_rngs.clone(),
            resample_rng: s.resample_rng.clone(),
            mto_rng: s.mto_rng.clone(),
            adaptive_s: s.adaptive_s.clone(),
        };
        let json = serde_json::to_vec(&meta)?;
        let floats = s.params.len() + s.optimizer.buffers.iter().map(Vec::len).sum::<usize>();
        let mut out = Vec::with_capacity(16 + json.len() + 8 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in s.params.iter().chain(s.optimizer.buffers.iter().flatten()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing SCWT header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let meta_end = 16usize.checked_add(meta_len).filter(|e| *e <= bytes.len()).ok_or_else(|| bad("truncated metadata"))?;
        let meta: CheckpointMeta = serde_json::from_slice(&bytes[16..meta_end])?;
        let body = &bytes[meta_end..];
        if body.len() % 8 != 0 {
            return Err(bad("parameter blob is not a whole number of f64"));
        }
        let floats: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let p = meta.param_count;
        let nb = meta.optimizer_buffers;
        if floats.len() != p * (1 + nb) {
            return Err(bad("blob size does not match the metadata"));
        }
        let params = floats[..p].to_vec();
        let buffers = (0..nb).map(|k| floats[p * (k + 1)..p * (k + 2)].to_vec()).collect();
        Ok(Self {
            member_id: meta.member_id,
            weights: meta.weights,
            scores: meta.scores,
            state: SessionState {
                params,
                optimizer: OptimizerState {
                    updates: meta.optimizer_updates,
                    buffers,
                },
                epoch: meta.epoch,
                step: meta.step,
                reweigh_rngs: meta.reweigh_rngs,
                resample_rng: meta.resample_rng,
                mto_rng: meta.mto_rng,
                adaptive_s: meta.adaptive_s,
            },
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Write-temp-then-rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// What happened at one sync.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncRecord {
    pub epoch: usize,
    pub scores: Vec<(usize, f64)>,
    pub replacements: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PbtResult {
    pub best: usize,
    pub members: Vec<PopulationMember>,
    pub syncs: Vec<SyncRecord>,
    /// Initial configurations plus one per explore step.
    pub explored_configs: usize,
    pub explored_bound: f64,
    /// Members that failed, with their errors.
    pub failures: Vec<(usize, String)>,
}

impl PbtResult {
    pub fn best_member(&self) -> &PopulationMember {
        self.members.iter().find(|m| m.id == self.best).expect("best member exists")
    }

    pub fn policy(&self) -> Result<WeightSchedule> {
        backtrack_policy(self.best, &self.members)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Execution of member epochs between syncs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Rayon worker threads; results are identical to sequential execution.
    Parallel { jobs: usize },
}

struct Worker {
    member: PopulationMember,
    session: TrainingSession,
}

impl Worker {
    fn train_until(&mut self, train: &MultiSourceDataset, holdout: &MultiSourceDataset, epoch: usize) {
        if !self.member.alive {
            return;
        }
        let outcome = (|| -> Result<Evaluation> {
            while self.session.epoch() < epoch {
                self.session.run_epoch(train, &self.member.weights)?;
            }
            let eval = evaluate(self.session.model(), holdout)?;
            if !eval.mean_oriented.is_finite() {
                return Err(Error::Divergence {
                    task: None,
                    reason: "non-finite holdout metric".into(),
                });
            }
            Ok(eval)
        })();
        match outcome {
            Ok(eval) => {
                self.member.score = Some(eval.mean_oriented);
                self.member.task_scores = eval.oriented();
            }
            Err(e) => {
                self.member.alive = false;
                self.member.score = None;
                self.member.failure = Some(e.to_string());
            }
        }
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            member_id: self.member.id,
            weights: self.member.weights.clone(),
            scores: self.member.task_scores.clone(),
            state: self.session.state(),
        }
    }
}

/// Splits `dataset` into a training part and a ranking holdout.
pub fn holdout_split(dataset: &MultiSourceDataset, config: &PbtConfig) -> Result<(MultiSourceDataset, MultiSourceDataset)> {
    dataset.split(1.0 - config.holdout_fraction, rng::derive_seed(config.seed, 0x4017))
}

/// Runs the search on `dataset` (which is split into training and holdout
/// parts). `train` provides the model, optimizer and batch settings; each
/// member uses its own seed derived from `config.seed`.
pub fn run_pbt(config: &PbtConfig, dataset: &MultiSourceDataset, train: &TrainConfig, execution: Execution) -> Result<PbtResult> {
    let (train_set, holdout) = holdout_split(dataset, config)?;
    run_pbt_on_split(config, &train_set, &holdout, train, execution)
}

pub fn run_pbt_on_split(
    config: &PbtConfig,
    train_set: &MultiSourceDataset,
    holdout: &MultiSourceDataset,
    train: &TrainConfig,
    execution: Execution,
) -> Result<PbtResult> {
    config.validate()?;
    if !train.method.uses_weights() {
        return Err(Error::config("population search needs the scalarization method"));
    }
    let t = train_set.source_count();
    let mut init_rng = rng::seeded(config.seed, 0xD1);
    let mut workers = Vec::with_capacity(config.population);
    for id in 0..config.population {
        let weights = sample_uniform_simplex(t, &mut init_rng);
        let member_cfg = TrainConfig {
            seed: rng::derive_seed(config.seed, 0x1000 + id as u64),
            ..train.clone()
        };
        workers.push(Worker {
            member: PopulationMember {
                id,
                weights: weights.clone(),
                history: vec![HistoryEntry {
                    epoch: 0,
                    weights,
                    event: HistoryEvent::Init,
                }],
                score: None,
                task_scores: Vec::new(),
                alive: true,
                failure: None,
                checkpoint: Vec::new(),
            },
            session: TrainingSession::new(train_set, &member_cfg)?,
        });
    }

    let pool = match execution {
        Execution::Sequential => None,
        Execution::Parallel { jobs } => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(jobs.max(1))
                .build()
                .map_err(|e| Error::config(format!("thread pool: {e}")))?,
        ),
    };
    let mut exploit_rng: ChaCha8Rng = rng::seeded(config.seed, 0xE7);
    let mut explored = config.population;
    let mut syncs = Vec::new();

    for sync_epoch in config.sync_epochs() {
        match &pool {
            None => workers.iter_mut().for_each(|w| w.train_until(train_set, holdout, sync_epoch)),
            Some(pool) => pool.install(|| {
                workers
                    .par_iter_mut()
                    .for_each(|w| w.train_until(train_set, holdout, sync_epoch))
            }),
        }
        for w in &mut workers {
            if w.member.alive {
                w.member.checkpoint = w.checkpoint().to_bytes()?;
            }
        }
        let scores: Vec<(usize, f64)> = workers
            .iter()
            .filter_map(|w| w.member.score.filter(|_| w.member.alive).map(|s| (w.member.id, s)))
            .collect();
        if scores.is_empty() {
            let why: Vec<String> = workers.iter().filter_map(|w| w.member.failure.clone()).collect();
            return Err(Error::PopulationFailed(why.join("; ")));
        }
        let mut replacements = Vec::new();
        if sync_epoch < config.total_epochs {
            replacements = exploit(&scores, config.quantile, &mut exploit_rng);
            for &(loser, winner) in &replacements {
                let source = Checkpoint::from_bytes(&workers[winner].member.checkpoint)?;
                let new_weights = explore(&source.weights, &mut exploit_rng, config)?;
                let w = &mut workers[loser];
                w.session.restore(&source.state)?;
                w.session
                    .reseed_streams(train_set, rng::derive_seed(rng::derive_seed(config.seed, loser as u64), sync_epoch as u64))?;
                let event = if new_weights == source.weights {
                    HistoryEvent::ExploitCopy { source: winner }
                } else {
                    HistoryEvent::ExplorePerturb { source: winner }
                };
                w.member.weights = new_weights.clone();
                w.member.score = None;
                w.member.history.push(HistoryEntry {
                    epoch: sync_epoch,
                    weights: new_weights,
                    event,
                });
                explored += 1;
            }
        }
        syncs.push(SyncRecord {
            epoch: sync_epoch,
            scores,
            replacements,
        });
    }

    let final_scores = &syncs.last().expect("at least one sync").scores;
    let best = rank(final_scores)[0];
    let failures = workers
        .iter()
        .filter_map(|w| w.member.failure.clone().map(|f| (w.member.id, f)))
        .collect();
    Ok(PbtResult {
        best,
        members: workers.into_iter().map(|w| w.member).collect(),
        syncs,
        explored_configs: explored,
        explored_bound: config.explored_bound(),
        failures,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetrainMode {
    /// Replay the whole backtracked schedule.
    Schedule,
    /// Use only the final weights of the schedule.
    FinalWeights,
}

/// The schedule a retraining run of `epochs` epochs follows.
pub fn retrain_schedule(schedule: &WeightSchedule, mode: RetrainMode, search_epochs: usize, epochs: usize) -> Result<WeightSchedule> {
    match mode {
        RetrainMode::Schedule if search_epochs != epochs => schedule.stretch(search_epochs, epochs),
        RetrainMode::Schedule => Ok(schedule.clone()),
        RetrainMode::FinalWeights => schedule
            .entries
            .last()
            .map(|(_, p)| WeightSchedule::constant(p.clone()))
            .ok_or_else(|| Error::config("empty weight schedule")),
    }
}

/// Trains a fresh model on `dataset` for `epochs` epochs under `schedule`,
/// stretched proportionally from `search_epochs` when the lengths differ.
pub fn retrain_with_policy(
    schedule: &WeightSchedule,
    mode: RetrainMode,
    search_epochs: usize,
    dataset: &MultiSourceDataset,
    train: &TrainConfig,
    epochs: usize,
) -> Result<TrainingSession> {
    let schedule = retrain_schedule(schedule, mode, search_epochs, epochs)?;
    let mut session = TrainingSession::new(dataset, train)?;
    session.train(dataset, &schedule, epochs)?;
    Ok(session)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn member(id: usize, history: Vec<(usize, f64, HistoryEvent)>) -> PopulationMember {
        let history: Vec<HistoryEntry> = history
            .into_iter()
            .map(|(epoch, p, event)| HistoryEntry {
                epoch,
                weights: WeightVector::pair(p).unwrap(),
                event,
            })
            .collect();
        PopulationMember {
            id,
            weights: history.last().unwrap().weights.clone(),
            history,
            score: None,
            task_scores: Vec::new(),
            alive: true,
            failure: None,
            checkpoint: Vec::new(),
        }
    }

    #[test]
    fn replacement_counts() {
        let mut c = PbtConfig::default();
        assert_eq!(c.replaced_count(), 3);
        c.quantile = 0.4;
        assert_eq!(c.replaced_count(), 5);
        c.population = 1;
        c.quantile = 0.25;
        assert!(c.validate().is_err());
        assert_eq!(replaced_count(0.1 + 0.2, 10), 3);
    }

    #[test]
    fn ties_rank_by_lower_id() {
        let scores: Vec<(usize, f64)> = (0..12).map(|i| (i, 0.5)).collect();
        let pairs = exploit(&scores, 0.25, &mut rng::seeded(0, 0));
        let losers: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        assert_eq!(losers, vec![9, 10, 11]);
        assert!(pairs.iter().all(|p| p.1 < 3));
    }

    #[test]
    fn hand_explore() {
        let p = WeightVector::pair(0.5).unwrap();
        let out = apply_perturbations(&p, &[Perturbation::Scale(1.25), Perturbation::Scale(0.8)]).unwrap();
        assert!((out.get(0) - 0.6098).abs() < 1e-4 && (out.get(1) - 0.3902).abs() < 1e-4);
        let q = WeightVector::new(vec![0.2, 0.3, 0.5]).unwrap();
        let same = apply_perturbations(&q, &[Perturbation::Scale(0.8); 3]).unwrap();
        for (a, b) in same.as_slice().iter().zip(q.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn backtrack_through_one_copy() {
        let a = member(0, vec![(0, 0.2, HistoryEvent::Init), (20, 0.9, HistoryEvent::ExploitCopy { source: 1 })]);
        let b = member(1, vec![(0, 0.7, HistoryEvent::Init), (10, 0.4, HistoryEvent::ExplorePerturb { source: 0 })]);
        let s = backtrack_policy(1, &[a.clone(), b.clone()]).unwrap();
        let got: Vec<(usize, f64)> = s.entries.iter().map(|(e, w)| (*e, w.get(0))).collect();
        assert_eq!(got, vec![(0, 0.2), (10, 0.4)]);
        let s = backtrack_policy(0, &[a, b]).unwrap();
        let got: Vec<(usize, f64)> = s.entries.iter().map(|(e, w)| (*e, w.get(0))).collect();
        assert_eq!(got, vec![(0, 0.2), (10, 0.4), (20, 0.9)]);
    }

    #[test]
    fn broken_chain_names_the_missing_link() {
        let b = member(1, vec![(0, 0.7, HistoryEvent::Init), (10, 0.4, HistoryEvent::ExploitCopy { source: 5 })]);
        let err = backtrack_policy(1, &[b]).unwrap_err();
        assert!(matches!(err, Error::BrokenChain(ref m) if m.contains("member 5")), "{err}");
    }

    #[test]
    fn sync_schedule() {
        let c = PbtConfig::default();
        assert_eq!(c.sync_epochs(), vec![5, 10, 15, 20, 25, 30]);
        assert_eq!(c.explored_bound(), 30.0);
    }
}
