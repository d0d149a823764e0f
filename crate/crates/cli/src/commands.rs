use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use scalweight::conflict::{affinity_matrix, variance_analysis, write_conflict_csv, ConflictRecord, RunGrid};
use scalweight::data::{write_csv, CsvSchema, DataSplits};
use scalweight::experiment::{
    delta_report, estimate_cost, run_sd_baselines, run_training, summarize_sweep, sweep_weights, tradeoff_table,
    with_vertices, write_delta_csv, write_metrics_csv, write_sweep_csv, write_tradeoff_csv, RunManifest, RunOptions,
    SdBaseline, SweepResult,
};
use scalweight::nn::Capacity;
use scalweight::pbt::{retrain_schedule, run_pbt, write_atomic, Execution, RetrainMode};
use scalweight::train::{TrainConfig, WeightSchedule};
use scalweight::weighting::WeightVector;

use crate::config::LoadedConfig;
use crate::error::{CliError, Result};

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(write_atomic(path, bytes)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)?.as_bytes())
}

fn write_csv_with<F>(path: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> scalweight::Result<()>,
{
    let mut buf = Vec::new();
    fill(&mut buf)?;
    write_file(path, &buf)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

/// Writes `manifest.json` and `metrics.csv` into `dir`.
fn write_run(dir: &Path, manifest: &RunManifest) -> Result<()> {
    write_file(&dir.join("manifest.json"), manifest.to_json()?.as_bytes())?;
    write_csv_with(&dir.join("metrics.csv"), |b| write_metrics_csv(b, &manifest.metrics))
}

fn write_conflicts(dir: &Path, records: &[ConflictRecord]) -> Result<()> {
    write_csv_with(&dir.join("conflicts.csv"), |b| write_conflict_csv(b, records))?;
    write_json(&dir.join("conflicts.json"), &records)?;
    let affinity = affinity_matrix(records)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &affinity {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::config(e.to_string()))?;
    write_file(&dir.join("affinity.csv"), &bytes)
}

pub struct TrainArgs {
    pub policy: Option<PathBuf>,
    pub run_id: Option<String>,
}

pub fn train(cfg: &LoadedConfig, args: &TrainArgs) -> Result<PathBuf> {
    let c = &cfg.config;
    let splits = cfg.splits()?;
    let seed = c.training.seeds[0];
    let train_cfg = c.train_config(seed, c.model.width_multiplier);
    let schedule = match &args.policy {
        Some(path) => read_json::<WeightSchedule>(path)?,
        None => c.schedule(splits.train.source_count())?,
    };
    let run_id = args
        .run_id
        .clone()
        .unwrap_or_else(|| format!("{}_s{seed}", train_cfg.method.name()));
    let opts = RunOptions {
        run_id: run_id.clone(),
        epochs: c.training.epochs,
        eval_every: 1,
        dataset_spec: cfg.dataset_spec(),
    };
    let outcome = run_training(&splits, &train_cfg, &schedule, &opts)?;
    let dir = c.output_root().join("train").join(&run_id);
    write_run(&dir, &outcome.manifest)?;
    let log = outcome.session.weight_log();
    let mut w = csv::Writer::from_writer(Vec::new());
    let t = splits.train.source_count();
    let mut header = vec!["step".to_string(), "epoch".to_string()];
    header.extend((0..t).map(|k| format!("p{k}")));
    w.write_record(&header)?;
    for e in log {
        let mut row = vec![e.step.to_string(), e.epoch.to_string()];
        row.extend(e.weights.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::config(e.to_string()))?;
    write_file(&dir.join("weights.csv"), &bytes)?;
    if let Some(profiler) = outcome.session.profiler() {
        write_conflicts(&dir, profiler.records())?;
    }
    write_json(&dir.join("config.json"), c)?;
    Ok(dir)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummary {
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub grid: Vec<WeightVector>,
    /// One result per width multiplier, in configuration order.
    pub sweeps: Vec<SweepResult>,
    pub sd_baselines: Vec<SdBaseline>,
}

pub fn sweep(cfg: &LoadedConfig, jobs: usize, include_vertices: bool) -> Result<PathBuf> {
    let c = &cfg.config;
    let splits = cfg.splits()?;
    let mut grid = c.sweep_grid(splits.train.source_count())?;
    if include_vertices || c.sweep.include_vertices {
        grid = with_vertices(grid);
    }
    let root = c.output_root().join("sweep");
    let seeds = &c.training.seeds;
    let mut sweeps = Vec::new();
    let mut capacities = Vec::new();
    for (w, mult) in c.width_multipliers().into_iter().enumerate() {
        let base = c.train_config(seeds[0], mult);
        let (result, manifests) = sweep_weights(&splits, &base, &grid, seeds, c.training.epochs, jobs, &format!("w{w}_"))?;
        for m in &manifests {
            let mut m = m.clone();
            m.dataset = cfg.dataset_spec();
            write_run(&root.join("runs").join(&m.run_id), &m)?;
        }
        write_csv_with(&root.join(format!("sweep_w{w}.csv")), |b| write_sweep_csv(b, &result))?;
        capacities.push(base.capacity.clone());
        sweeps.push(result);
    }
    let mut sd_baselines = Vec::new();
    if c.sweep.sd_baselines {
        let base = c.train_config(seeds[0], c.model.width_multiplier);
        sd_baselines = run_sd_baselines(&splits, &base, &capacities, seeds, c.training.epochs)?;
        write_plot_tables(&root, &sweeps, &sd_baselines)?;
    }
    let summary = SweepSummary {
        epochs: c.training.epochs,
        seeds: seeds.clone(),
        grid,
        sweeps,
        sd_baselines,
    };
    write_json(&root.join("summary.json"), &summary)?;
    write_json(&root.join("config.json"), c)?;
    Ok(root)
}

fn sd_test_metrics(baselines: &[SdBaseline], capacity: &Capacity) -> Vec<f64> {
    let mut rows: Vec<&SdBaseline> = baselines.iter().filter(|b| &b.capacity == capacity).collect();
    rows.sort_by_key(|b| b.source);
    rows.iter().map(|b| b.test_metric).collect()
}

fn write_plot_tables(dir: &Path, sweeps: &[SweepResult], baselines: &[SdBaseline]) -> Result<()> {
    let mut delta_rows = Vec::new();
    for s in sweeps {
        delta_rows.push((s.capacity.clone(), delta_report(s, &sd_test_metrics(baselines, &s.capacity))?));
    }
    write_csv_with(&dir.join("delta.csv"), |b| write_delta_csv(b, &delta_rows))?;
    let rows = tradeoff_table(sweeps, baselines)?;
    write_csv_with(&dir.join("tradeoff.csv"), |b| write_tradeoff_csv(b, &rows))
}

pub struct PbtArgs {
    pub jobs: usize,
    pub rank_split: Option<f64>,
}

pub fn pbt(cfg: &LoadedConfig, args: &PbtArgs) -> Result<PathBuf> {
    let c = &cfg.config;
    let splits = cfg.splits()?;
    let mut pcfg = c.pbt_config();
    if let Some(f) = args.rank_split {
        pcfg.holdout_fraction = f;
    }
    let seed = c.training.seeds[0];
    let train_cfg = c.train_config(seed, c.model.width_multiplier);
    let execution = if args.jobs > 1 {
        Execution::Parallel { jobs: args.jobs }
    } else {
        Execution::Sequential
    };
    let result = run_pbt(&pcfg, &splits.train, &train_cfg, execution)?;
    let root = c.output_root().join("pbt");
    write_file(&root.join("search.json"), result.to_json()?.as_bytes())?;
    for m in &result.members {
        if !m.checkpoint.is_empty() {
            write_file(&root.join("members").join(format!("member_{:03}.ckpt", m.id)), &m.checkpoint)?;
        }
    }
    let search_policy = result.policy()?;
    write_json(&root.join("search_policy.json"), &search_policy)?;

    let epochs = c.pbt.retrain_epochs.unwrap_or(c.training.epochs);
    let policy = retrain_schedule(&search_policy, c.pbt.retrain, pcfg.total_epochs, epochs)?;
    write_json(&root.join("policy.json"), &policy)?;
    let mut retrain_cfg = train_cfg;
    retrain_cfg.optimizer.total_epochs = epochs;
    let opts = RunOptions {
        run_id: "pbt_retrain".into(),
        epochs,
        eval_every: 1,
        dataset_spec: cfg.dataset_spec(),
    };
    let mut manifest = run_training(&splits, &retrain_cfg, &policy, &opts)?.manifest;
    manifest.method = "pbt".into();
    manifest.schedule = Some(policy);
    manifest.weights = None;
    manifest.notes.push(format!(
        "best member {} of {}; {} configurations explored (bound {:.1}); holdout fraction {}",
        result.best, pcfg.population, result.explored_configs, result.explored_bound, pcfg.holdout_fraction
    ));
    if c.pbt.retrain == RetrainMode::Schedule && epochs != pcfg.total_epochs {
        manifest.notes.push(format!(
            "schedule stretched from {} search epochs to {epochs} retraining epochs",
            pcfg.total_epochs
        ));
    }
    for (id, why) in &result.failures {
        manifest.notes.push(format!("member {id} failed: {why}"));
    }
    write_run(&root.join("retrain"), &manifest)?;
    write_json(&root.join("config.json"), c)?;
    Ok(root)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileKind {
    Conflicts,
    Memory,
}

pub fn profile(cfg: &LoadedConfig, what: ProfileKind, jobs: usize) -> Result<PathBuf> {
    let c = &cfg.config;
    let root = c.output_root().join("profile");
    let splits = cfg.splits()?;
    match what {
        ProfileKind::Memory => profile_memory(cfg, &splits, &root)?,
        ProfileKind::Conflicts => {
            let seed = c.training.seeds[0];
            let mut train_cfg = c.train_config(seed, c.model.width_multiplier);
            train_cfg.profile_stride = Some(c.profile.stride);
            let records = profiled_run(&splits, &train_cfg, c, "profile")?;
            write_conflicts(&root, &records)?;
            if !c.profile.grid.is_empty() {
                profile_variance(cfg, &splits, &root, jobs)?;
            }
        }
    }
    write_json(&root.join("config.json"), c)?;
    Ok(root)
}

fn profiled_run(
    splits: &DataSplits,
    train_cfg: &TrainConfig,
    c: &crate::config::ExperimentConfig,
    run_id: &str,
) -> Result<Vec<ConflictRecord>> {
    let opts = RunOptions {
        run_id: run_id.into(),
        epochs: c.training.epochs,
        eval_every: 0,
        dataset_spec: serde_json::Value::Null,
    };
    let schedule = c.schedule(splits.train.source_count())?;
    let outcome = run_training(splits, train_cfg, &schedule, &opts)?;
    Ok(outcome
        .session
        .profiler()
        .map(|p| p.records().to_vec())
        .unwrap_or_default())
}

fn profile_memory(cfg: &LoadedConfig, splits: &DataSplits, root: &Path) -> Result<()> {
    let c = &cfg.config;
    let t = splits.train.source_count();
    let train_cfg = c.train_config(c.training.seeds[0], c.model.width_multiplier);
    let params = train_cfg.architecture(&splits.train).param_count();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "tasks", "param_count", "stored_gradient_values", "backward_passes", "bytes"])?;
    for m in &c.profile.methods {
        let cost = estimate_cost(m, t, params);
        w.write_record([
            m.name().to_string(),
            t.to_string(),
            params.to_string(),
            cost.stored_gradient_values.to_string(),
            cost.backward_passes.to_string(),
            cost.bytes.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::config(e.to_string()))?;
    write_file(&root.join("memory.csv"), &bytes)
}

/// Every combination of the configured grid axes, as `(axis values, config)`.
fn grid_cells(c: &crate::config::ExperimentConfig) -> Vec<(Vec<String>, TrainConfig)> {
    let axes: Vec<(&String, &Vec<f64>)> = c.profile.grid.iter().collect();
    let mut cells: Vec<(Vec<String>, TrainConfig)> =
        vec![(Vec::new(), c.train_config(c.training.seeds[0], c.model.width_multiplier))];
    for (axis, values) in axes {
        let mut next = Vec::with_capacity(cells.len() * values.len());
        for (key, cfg) in &cells {
            for &v in values {
                let mut cfg = cfg.clone();
                match axis.as_str() {
                    "learning_rate" => cfg.optimizer.learning_rate = v,
                    "width_multiplier" => cfg.capacity.width_multiplier = v,
                    "batch_size" => cfg.batch_size = v as usize,
                    "seed" => cfg.seed = v as u64,
                    _ => unreachable!("axes are validated with the config"),
                }
                let mut key = key.clone();
                key.push(v.to_string());
                next.push((key, cfg));
            }
        }
        cells = next;
    }
    cells
}

fn profile_variance(cfg: &LoadedConfig, splits: &DataSplits, root: &Path, jobs: usize) -> Result<()> {
    let c = &cfg.config;
    let axes: Vec<String> = c.profile.grid.keys().cloned().collect();
    let cells = grid_cells(c);
    let run = |(key, train_cfg): &(Vec<String>, TrainConfig)| -> Result<(Vec<String>, Vec<f64>)> {
        let mut train_cfg = train_cfg.clone();
        train_cfg.profile_stride = Some(c.profile.stride);
        train_cfg.validate()?;
        let records = profiled_run(splits, &train_cfg, c, "grid")?;
        Ok((key.clone(), records.iter().map(|r| r.fraction).collect()))
    };
    let results: Vec<(Vec<String>, Vec<f64>)> = if jobs > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
        pool.install(|| cells.par_iter().map(run).collect::<Result<Vec<_>>>())?
    } else {
        cells.iter().map(run).collect::<Result<Vec<_>>>()?
    };
    let mut grid = RunGrid::new(axes.clone());
    let mut runs = csv::Writer::from_writer(Vec::new());
    let mut header = axes.clone();
    header.extend(["epoch".to_string(), "fraction".to_string()]);
    runs.write_record(&header)?;
    for (key, fractions) in results {
        for (e, f) in fractions.iter().enumerate() {
            let mut row = key.clone();
            row.extend([e.to_string(), f.to_string()]);
            runs.write_record(&row)?;
        }
        grid.insert(key, fractions)?;
    }
    let bytes = runs.into_inner().map_err(|e| CliError::config(e.to_string()))?;
    write_file(&root.join("grid_runs.csv"), &bytes)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["axis", "median_variance"])?;
    for axis in &axes {
        w.write_record([axis.clone(), variance_analysis(&grid, axis)?.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::config(e.to_string()))?;
    write_file(&root.join("variance.csv"), &bytes)
}

/// Rebuilds every sweep summary from the run manifests alone and writes
/// `report.csv`. Fails when the stored best point disagrees.
pub fn report(cfg: &LoadedConfig) -> Result<PathBuf> {
    let root = cfg.config.output_root().join("sweep");
    let summary: SweepSummary = read_json(&root.join("summary.json"))?;
    let runs_dir = root.join("runs");
    let mut names: Vec<String> = std::fs::read_dir(&runs_dir)
        .map_err(|e| CliError::io(&runs_dir, e))?
        .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect::<std::io::Result<_>>()
        .map_err(|e| CliError::io(&runs_dir, e))?;
    names.sort();
    let mut manifests = Vec::with_capacity(names.len());
    for n in &names {
        manifests.push(RunManifest::from_json(&read_text(&runs_dir.join(n).join("manifest.json"))?)?);
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    let t = summary.grid.first().map(WeightVector::len).unwrap_or(0);
    let mut header = vec!["width_multiplier".to_string(), "point".to_string()];
    header.extend((0..t).map(|k| format!("p{k}")));
    header.extend(["runs".into(), "validation_mean".into(), "test_mean_oriented".into(), "best".into()]);
    w.write_record(&header)?;
    for stored in &summary.sweeps {
        // Group this capacity's runs by weight vector, in grid order of first appearance.
        let mut groups: Vec<(WeightVector, Vec<RunManifest>)> = Vec::new();
        for m in manifests.iter().filter(|m| m.train.capacity == stored.capacity) {
            let p = m
                .weights
                .clone()
                .ok_or_else(|| CliError::config(format!("run {} has no constant weights", m.run_id)))?;
            match groups.iter_mut().find(|(q, _)| *q == p) {
                Some((_, g)) => g.push(m.clone()),
                None => groups.push((p, vec![m.clone()])),
            }
        }
        let per_point = groups.first().map(|(_, g)| g.len()).unwrap_or(0);
        if groups.is_empty() || groups.iter().any(|(_, g)| g.len() != per_point) {
            return Err(CliError::config("sweep runs do not form a complete grid"));
        }
        let mut seeds: Vec<u64> = groups[0].1.iter().map(|m| m.train.seed).collect();
        seeds.sort_unstable();
        let grid: Vec<WeightVector> = groups.iter().map(|(p, _)| p.clone()).collect();
        let ordered: Vec<RunManifest> = groups
            .into_iter()
            .flat_map(|(_, mut g)| {
                g.sort_by_key(|m| m.train.seed);
                g
            })
            .collect();
        let base = ordered[0].train.clone();
        let recomputed = summarize_sweep(&base, &grid, &seeds, &ordered, stored.metric_kinds.clone())?;
        if recomputed.best_weights() != stored.best_weights() {
            return Err(CliError::config(format!(
                "summary best {:?} disagrees with recomputed best {:?}",
                stored.best_weights().as_slice(),
                recomputed.best_weights().as_slice()
            )));
        }
        for (i, p) in recomputed.points.iter().enumerate() {
            let mut row = vec![stored.capacity.width_multiplier.to_string(), i.to_string()];
            row.extend(p.weights.as_slice().iter().map(|v| v.to_string()));
            row.extend([
                p.run_ids.len().to_string(),
                p.validation_mean.to_string(),
                p.test_mean_oriented.to_string(),
                (i == recomputed.best).to_string(),
            ]);
            w.write_record(&row)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| CliError::config(e.to_string()))?;
    write_file(&root.join("report.csv"), &bytes)?;
    Ok(root)
}

pub fn datagen(cfg: &LoadedConfig) -> Result<PathBuf> {
    let ds = cfg.full_dataset()?;
    let dir = cfg.config.output_root().join("data");
    write_csv_with(&dir.join("dataset.csv"), |b| write_csv(b, &ds))?;
    write_json(&dir.join("schema.json"), &CsvSchema::of(&ds))?;
    Ok(dir)
}

/// Plot tables from the outputs of earlier `sweep` and `profile` runs.
pub fn export(cfg: &LoadedConfig) -> Result<PathBuf> {
    let root = cfg.config.output_root();
    let dir = root.join("plots");
    let mut wrote = false;
    let summary_path = root.join("sweep").join("summary.json");
    if summary_path.exists() {
        let summary: SweepSummary = read_json(&summary_path)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        let t = summary.grid.first().map(WeightVector::len).unwrap_or(0);
        let mut header = vec!["width_multiplier".to_string()];
        header.extend((0..t).map(|k| format!("p{k}")));
        header.extend((0..t).map(|k| format!("test_{k}")));
        header.push("validation_mean".into());
        w.write_record(&header)?;
        for s in &summary.sweeps {
            for p in &s.points {
                let mut row = vec![s.capacity.width_multiplier.to_string()];
                row.extend(p.weights.as_slice().iter().map(|v| v.to_string()));
                row.extend(p.test_task_mean.iter().map(|v| v.to_string()));
                row.push(p.validation_mean.to_string());
                w.write_record(&row)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| CliError::config(e.to_string()))?;
        write_file(&dir.join("weight_curves.csv"), &bytes)?;
        if !summary.sd_baselines.is_empty() {
            let mut tmp = Vec::new();
            for s in &summary.sweeps {
                tmp.push((s.capacity.clone(), delta_report(s, &sd_test_metrics(&summary.sd_baselines, &s.capacity))?));
            }
            write_csv_with(&dir.join("delta_heatmap.csv"), |b| write_delta_csv(b, &tmp))?;
            let rows = tradeoff_table(&summary.sweeps, &summary.sd_baselines)?;
            write_csv_with(&dir.join("tradeoff_scatter.csv"), |b| write_tradeoff_csv(b, &rows))?;
        }
        wrote = true;
    }
    let conflicts_path = root.join("profile").join("conflicts.json");
    if conflicts_path.exists() {
        let records: Vec<ConflictRecord> = read_json(&conflicts_path)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "pair", "fraction"])?;
        for r in &records {
            w.write_record([r.epoch.to_string(), "all".into(), r.fraction.to_string()])?;
            let t = r.task_count();
            for i in 0..t {
                for j in i + 1..t {
                    if let Some(f) = r.pair_fraction(i, j) {
                        w.write_record([r.epoch.to_string(), format!("{i}-{j}"), f.to_string()])?;
                    }
                }
            }
        }
        let bytes = w.into_inner().map_err(|e| CliError::config(e.to_string()))?;
        write_file(&dir.join("conflict_curves.csv"), &bytes)?;
        wrote = true;
    }
    if !wrote {
        return Err(CliError::config(format!(
            "nothing to export under {}: run `sweep` or `profile conflicts` first",
            root.display()
        )));
    }
    Ok(dir)
}
