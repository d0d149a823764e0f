//! Experiment harness: run manifests, single-dataset baselines, weight
//! sweeps with validation-based selection, delta and trade-off reports, and
//! the gradient-storage cost model.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DataSplits, MultiSourceDataset};
use crate::error::{Error, Result};
use crate::nn::{Capacity, MetricKind, Model};
use crate::train::{evaluate, train_single_source, Evaluation, Method, TrainConfig, TrainingSession, WeightSchedule};
use crate::weighting::WeightVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub epoch: usize,
    pub task: String,
    pub split: String,
    pub metric_name: String,
    pub value: f64,
}

/// Gradient values held per step and backward passes per step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub stored_gradient_values: usize,
    pub backward_passes: usize,
    pub bytes: usize,
}

/// Scalarization and loss-based methods keep one gradient and do one
/// backward pass; gradient-based methods keep `T` and do `T`.
pub fn estimate_cost(method: &Method, tasks: usize, param_count: usize) -> CostEstimate {
    let k = if method.is_gradient_based() { tasks } else { 1 };
    CostEstimate {
        stored_gradient_values: k * param_count,
        backward_passes: k,
        bytes: 8 * k * param_count,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub dataset: serde_json::Value,
    pub train: TrainConfig,
    pub method: String,
    pub weights: Option<WeightVector>,
    pub schedule: Option<WeightSchedule>,
    pub epochs: usize,
    pub param_count: usize,
    pub steps_per_epoch: usize,
    pub cost: CostEstimate,
    /// Gradient-based methods combine per-task gradients after accumulation.
    pub accumulation: String,
    pub wall_clock_secs: f64,
    pub metrics: Vec<MetricRow>,
    pub final_validation: Option<Evaluation>,
    pub final_test: Option<Evaluation>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl RunManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn metric_rows(run_id: &str, epoch: usize, split: &str, eval: &Evaluation) -> Vec<MetricRow> {
    eval.per_source
        .iter()
        .map(|m| MetricRow {
            run_id: run_id.to_string(),
            epoch,
            task: m.source.clone(),
            split: split.to_string(),
            metric_name: m.metric.clone(),
            value: m.value,
        })
        .collect()
}

/// Options for [`run_training`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub run_id: String,
    pub epochs: usize,
    /// Evaluate every this many epochs (0: only at the end).
    pub eval_every: usize,
    pub dataset_spec: serde_json::Value,
}

pub struct RunOutcome {
    pub manifest: RunManifest,
    pub session: TrainingSession,
}

/// Trains one run on `splits.train` and records per-epoch train and test
/// metrics plus final validation and test evaluations.
pub fn run_training(splits: &DataSplits, config: &TrainConfig, schedule: &WeightSchedule, opts: &RunOptions) -> Result<RunOutcome> {
    let start = Instant::now();
    let mut session = TrainingSession::new(&splits.train, config)?;
    let mut metrics = Vec::new();
    while session.epoch() < opts.epochs {
        let p = schedule.weights_at(session.epoch()).clone();
        let stats = session.run_epoch(&splits.train, &p)?;
        let done = stats.epoch + 1;
        if (opts.eval_every > 0 && done % opts.eval_every == 0) || done == opts.epochs {
            metrics.extend(metric_rows(&opts.run_id, stats.epoch, "train", &evaluate(session.model(), &splits.train)?));
            metrics.extend(metric_rows(&opts.run_id, stats.epoch, "test", &evaluate(session.model(), &splits.test)?));
        }
    }
    let validation = evaluate(session.model(), &splits.validation)?;
    let test = evaluate(session.model(), &splits.test)?;
    let t = splits.train.source_count();
    let (weights, sched) = if config.method.uses_weights() {
        if schedule.entries.len() == 1 {
            (Some(schedule.entries[0].1.clone()), None)
        } else {
            (None, Some(schedule.clone()))
        }
    } else {
        (None, None)
    };
    let manifest = RunManifest {
        run_id: opts.run_id.clone(),
        dataset: opts.dataset_spec.clone(),
        train: config.clone(),
        method: config.method.name().to_string(),
        weights,
        schedule: sched,
        epochs: opts.epochs,
        param_count: session.model().param_count(),
        steps_per_epoch: session.steps_per_epoch(),
        cost: estimate_cost(&config.method, t, session.model().param_count()),
        accumulation: "post-accumulation".into(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
        metrics,
        final_validation: Some(validation),
        final_test: Some(test),
        notes: Vec::new(),
    };
    Ok(RunOutcome { manifest, session })
}

/// `k` evenly spaced two-task weights `(p1, 1 - p1)` with `p1 = i / (k - 1)`.
pub fn pair_grid(k: usize) -> Result<Vec<WeightVector>> {
    if k < 2 {
        return Err(Error::config("a weight grid needs at least two points"));
    }
    (0..k).map(|i| WeightVector::pair(i as f64 / (k - 1) as f64)).collect()
}

/// Adds the simplex vertices that are missing from `grid`.
pub fn with_vertices(mut grid: Vec<WeightVector>) -> Vec<WeightVector> {
    if let Some(t) = grid.first().map(WeightVector::len) {
        for k in 0..t {
            let v = WeightVector::vertex(t, k);
            if !grid.contains(&v) {
                grid.push(v);
            }
        }
    }
    grid
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub weights: WeightVector,
    /// Seed mean and std of the validation mean oriented metric.
    pub validation_mean: f64,
    pub validation_std: f64,
    /// Seed mean and std of each task's raw test metric.
    pub test_task_mean: Vec<f64>,
    pub test_task_std: Vec<f64>,
    pub test_mean_oriented: f64,
    pub run_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub capacity: Capacity,
    pub param_count: usize,
    pub seeds: Vec<u64>,
    pub metric_kinds: Vec<MetricKind>,
    pub points: Vec<SweepPoint>,
    /// Index of `p*`, the point with the best validation mean.
    pub best: usize,
}

impl SweepResult {
    pub fn best_weights(&self) -> &WeightVector {
        &self.points[self.best].weights
    }

    pub fn validation_means(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.validation_mean).collect()
    }
}

/// Index of the largest value, ties to the lower index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn metric_kinds(ds: &MultiSourceDataset) -> Vec<MetricKind> {
    (0..ds.source_count()).map(|t| ds.task_of(t).metric()).collect()
}

/// Trains every `(grid point, seed)` cell with constant weights, averages the
/// validation and test evaluations across seeds and selects `p*` on the
/// validation split. Run ids are `<run_prefix>p<index>_s<seed>`.
pub fn sweep_weights(
    splits: &DataSplits,
    base: &TrainConfig,
    grid: &[WeightVector],
    seeds: &[u64],
    epochs: usize,
    jobs: usize,
    run_prefix: &str,
) -> Result<(SweepResult, Vec<RunManifest>)> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(Error::config("sweep needs at least one grid point and one seed"));
    }
    let t = splits.train.source_count();
    if grid.iter().any(|p| p.len() != t) {
        return Err(Error::config("grid weights do not match the number of sources"));
    }
    let cells: Vec<(usize, u64)> = (0..grid.len()).flat_map(|i| seeds.iter().map(move |s| (i, *s))).collect();
    let run = |&(i, seed): &(usize, u64)| -> Result<RunManifest> {
        let cfg = TrainConfig { seed, ..base.clone() };
        let opts = RunOptions {
            run_id: format!("{run_prefix}p{i:03}_s{seed}"),
            epochs,
            eval_every: 0,
            dataset_spec: serde_json::Value::Null,
        };
        Ok(run_training(splits, &cfg, &WeightSchedule::constant(grid[i].clone()), &opts)?.manifest)
    };
    let manifests: Vec<RunManifest> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
        pool.install(|| cells.par_iter().map(run).collect::<Result<Vec<_>>>())?
    } else {
        cells.iter().map(run).collect::<Result<Vec<_>>>()?
    };
    let result = summarize_sweep(base, grid, seeds, &manifests, metric_kinds(&splits.train))?;
    Ok((result, manifests))
}

/// Rebuilds a sweep summary from its run manifests (grid-major, seed-minor).
pub fn summarize_sweep(
    base: &TrainConfig,
    grid: &[WeightVector],
    seeds: &[u64],
    manifests: &[RunManifest],
    metric_kinds: Vec<MetricKind>,
) -> Result<SweepResult> {
    if manifests.len() != grid.len() * seeds.len() {
        return Err(Error::data("manifest count does not match the sweep grid"));
    }
    let mut points = Vec::with_capacity(grid.len());
    for (i, p) in grid.iter().enumerate() {
        let runs = &manifests[i * seeds.len()..(i + 1) * seeds.len()];
        let val: Vec<f64> = runs
            .iter()
            .map(|m| m.final_validation.as_ref().map(|e| e.mean_oriented).ok_or_else(|| Error::data("run lacks a validation evaluation")))
            .collect::<Result<_>>()?;
        let tests: Vec<&Evaluation> = runs
            .iter()
            .map(|m| m.final_test.as_ref().ok_or_else(|| Error::data("run lacks a test evaluation")))
            .collect::<Result<_>>()?;
        let t = tests[0].per_source.len();
        let (mut tm, mut ts) = (Vec::with_capacity(t), Vec::with_capacity(t));
        for k in 0..t {
            let v: Vec<f64> = tests.iter().map(|e| e.per_source[k].value).collect();
            let (m, s) = mean_std(&v);
            tm.push(m);
            ts.push(s);
        }
        let (vm, vs) = mean_std(&val);
        let (test_mean_oriented, _) = mean_std(&tests.iter().map(|e| e.mean_oriented).collect::<Vec<_>>());
        points.push(SweepPoint {
            weights: p.clone(),
            validation_mean: vm,
            validation_std: vs,
            test_task_mean: tm,
            test_task_std: ts,
            test_mean_oriented,
            run_ids: runs.iter().map(|m| m.run_id.clone()).collect(),
        });
    }
    let best = argmax(&points.iter().map(|p| p.validation_mean).collect::<Vec<_>>());
    Ok(SweepResult {
        capacity: base.capacity.clone(),
        param_count: manifests[0].param_count,
        seeds: seeds.to_vec(),
        metric_kinds,
        points,
        best,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdBaseline {
    pub capacity: Capacity,
    pub source: usize,
    pub param_count: usize,
    /// Seed means of the raw metric on the source's own data.
    pub train_metric: f64,
    pub test_metric: f64,
}

/// One single-dataset model per `(capacity, source)`, averaged over seeds.
pub fn run_sd_baselines(
    splits: &DataSplits,
    base: &TrainConfig,
    capacities: &[Capacity],
    seeds: &[u64],
    epochs: usize,
) -> Result<Vec<SdBaseline>> {
    let mut out = Vec::new();
    for cap in capacities {
        for t in 0..splits.train.source_count() {
            let mut train_m = Vec::new();
            let mut test_m = Vec::new();
            let mut params = 0;
            for &seed in seeds {
                let cfg = TrainConfig {
                    capacity: cap.clone(),
                    seed,
                    ..base.clone()
                };
                let model = train_single_source(&splits.train, t, &cfg, epochs)?;
                params = single_task_param_count(&model, splits, t, &cfg)?;
                train_m.push(source_metric(&model, &splits.train, t)?);
                test_m.push(source_metric(&model, &splits.test, t)?);
            }
            out.push(SdBaseline {
                capacity: cap.clone(),
                source: t,
                param_count: params,
                train_metric: mean_std(&train_m).0,
                test_metric: mean_std(&test_m).0,
            });
        }
    }
    Ok(out)
}

/// Parameters a stand-alone model for source `t` would need (trunk plus
/// that source's head only).
fn single_task_param_count(model: &Model, splits: &DataSplits, t: usize, cfg: &TrainConfig) -> Result<usize> {
    let mut arch = cfg.architecture(&splits.train);
    arch.head_outputs = vec![arch.head_outputs[splits.train.head_of(t)]];
    arch.validate()?;
    let _ = model;
    Ok(arch.param_count())
}

pub fn source_metric(model: &Model, dataset: &MultiSourceDataset, t: usize) -> Result<f64> {
    let s = dataset.source(t);
    let out = model.predict(&s.inputs, dataset.head_of(t))?;
    crate::nn::metric(dataset.task_of(t).metric(), &out, &s.targets)
}

/// Signed per-task differences at `p*`, oriented so that positive means the
/// joint model is better.
pub fn delta_report(sweep: &SweepResult, sd_test_metrics: &[f64]) -> Result<Vec<f64>> {
    let best = &sweep.points[sweep.best];
    deltas(&best.test_task_mean, sd_test_metrics, &sweep.metric_kinds)
}

pub fn deltas(joint: &[f64], sd: &[f64], kinds: &[MetricKind]) -> Result<Vec<f64>> {
    if joint.len() != sd.len() || joint.len() != kinds.len() {
        return Err(Error::Dimension {
            context: "delta report",
            expected: joint.len(),
            actual: sd.len(),
        });
    }
    Ok(joint
        .iter()
        .zip(sd)
        .zip(kinds)
        .map(|((j, s), k)| k.oriented(*j) - k.oriented(*s))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub capacity: Capacity,
    pub weights: WeightVector,
    pub metrics: Vec<f64>,
    pub param_count: usize,
    pub sd_param_count: usize,
    pub dominates_sd: bool,
}

/// Strictly better on every task (after orientation).
pub fn dominates(joint: &[f64], sd: &[f64], kinds: &[MetricKind]) -> bool {
    joint
        .iter()
        .zip(sd)
        .zip(kinds)
        .all(|((j, s), k)| k.oriented(*j) > k.oriented(*s))
}

/// One row per grid point of every sweep, compared against the SD baselines
/// of the same capacity.
pub fn tradeoff_table(sweeps: &[SweepResult], baselines: &[SdBaseline]) -> Result<Vec<TradeoffRow>> {
    let mut rows = Vec::new();
    for sw in sweeps {
        let mut sd: Vec<&SdBaseline> = baselines.iter().filter(|b| b.capacity == sw.capacity).collect();
        sd.sort_by_key(|b| b.source);
        if sd.len() != sw.metric_kinds.len() {
            return Err(Error::data("missing SD baselines for a sweep capacity"));
        }
        let sd_metrics: Vec<f64> = sd.iter().map(|b| b.test_metric).collect();
        let sd_params: usize = sd.iter().map(|b| b.param_count).sum();
        for p in &sw.points {
            rows.push(TradeoffRow {
                capacity: sw.capacity.clone(),
                weights: p.weights.clone(),
                metrics: p.test_task_mean.clone(),
                param_count: sw.param_count,
                sd_param_count: sd_params,
                dominates_sd: dominates(&p.test_task_mean, &sd_metrics, &sw.metric_kinds),
            });
        }
    }
    Ok(rows)
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::data("spearman needs two equal-length series of at least two values"));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb) * (y - mb)).sum();
    if va == 0.0 || vb == 0.0 {
        return Err(Error::data("spearman is undefined for a constant series"));
    }
    Ok(cov / (va * vb).sqrt())
}

pub fn write_metrics_csv<W: Write>(writer: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

/// One row per grid point: weights, validation mean/std, test metrics.
pub fn write_sweep_csv<W: Write>(writer: W, sweep: &SweepResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let t = sweep.metric_kinds.len();
    let mut header: Vec<String> = (0..t).map(|k| format!("p{k}")).collect();
    header.extend(["validation_mean".into(), "validation_std".into(), "test_mean_oriented".into()]);
    for k in 0..t {
        header.push(format!("test_{k}_mean"));
        header.push(format!("test_{k}_std"));
    }
    header.push("best".into());
    w.write_record(&header)?;
    for (i, p) in sweep.points.iter().enumerate() {
        let mut row: Vec<String> = p.weights.as_slice().iter().map(|v| v.to_string()).collect();
        row.extend([p.validation_mean.to_string(), p.validation_std.to_string(), p.test_mean_oriented.to_string()]);
        for k in 0..t {
            row.push(p.test_task_mean[k].to_string());
            row.push(p.test_task_std[k].to_string());
        }
        row.push((i == sweep.best).to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

/// Plot data for the trade-off scatter.
pub fn write_tradeoff_csv<W: Write>(writer: W, rows: &[TradeoffRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let t = rows.first().map(|r| r.metrics.len()).unwrap_or(0);
    let mut header: Vec<String> = vec!["trunk_depth".into(), "width_multiplier".into(), "shared_head_layers".into()];
    header.extend((0..t).map(|k| format!("p{k}")));
    header.extend((0..t).map(|k| format!("metric_{k}")));
    header.extend(["param_count".into(), "sd_param_count".into(), "dominates_sd".into()]);
    w.write_record(&header)?;
    for r in rows {
        let mut row = vec![
            r.capacity.trunk_depth.to_string(),
            r.capacity.width_multiplier.to_string(),
            r.capacity.shared_head_layers.to_string(),
        ];
        row.extend(r.weights.as_slice().iter().map(|v| v.to_string()));
        row.extend(r.metrics.iter().map(|v| v.to_string()));
        row.extend([r.param_count.to_string(), r.sd_param_count.to_string(), r.dominates_sd.to_string()]);
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

/// Plot data for the delta heatmap: one row per `(capacity, task)`.
pub fn write_delta_csv<W: Write>(writer: W, rows: &[(Capacity, Vec<f64>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["trunk_depth", "width_multiplier", "shared_head_layers", "task", "delta"])?;
    for (cap, d) in rows {
        for (k, v) in d.iter().enumerate() {
            w.write_record([
                cap.trunk_depth.to_string(),
                cap.width_multiplier.to_string(),
                cap.shared_head_layers.to_string(),
                k.to_string(),
                v.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}
