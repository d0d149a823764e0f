use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BASE: &str = r#"
[dataset.source]
kind = "multi-domain"
n_per_source = [120, 80]

[model]
trunk_depth = 1
base_width = 8

[training]
epochs = 3
seeds = [0, 1]
"#;

struct Sandbox {
    dir: TempDir,
}

impl Sandbox {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("exp.toml"), format!("{BASE}\n{extra}")).unwrap();
        Self { dir }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_scalweight"));
        cmd.arg(args[0]).arg(self.dir.path().join("exp.toml")).args(&args[1..]);
        cmd.env("SCALWEIGHT_OUT", self.out()).current_dir(self.dir.path());
        cmd.output().unwrap()
    }

    fn ok(&self, args: &[&str]) {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    }

    fn read(&self, rel: &str) -> String {
        std::fs::read_to_string(self.out().join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
    }
}

fn csv_rows(text: &str) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers().unwrap().clone();
    r.records()
        .map(|rec| headers.iter().zip(rec.unwrap().iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect())
        .collect()
}

fn json(text: &str) -> serde_json::Value {
    serde_json::from_str(text).unwrap()
}

fn dirs_in(path: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(path)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[test]
fn train_writes_one_metric_row_per_epoch_and_task() {
    let sb = Sandbox::new("");
    sb.ok(&["train"]);
    let rows = csv_rows(&sb.read("train/scalarization_s0/metrics.csv"));
    let train: Vec<_> = rows.iter().filter(|r| r["split"] == "train").collect();
    assert_eq!(train.len(), 3 * 2);
    for epoch in 0..3 {
        for task in ["domain0", "domain1"] {
            let n = train.iter().filter(|r| r["epoch"] == epoch.to_string() && r["task"] == task).count();
            assert_eq!(n, 1);
        }
    }
    let header = sb.read("train/scalarization_s0/metrics.csv").lines().next().unwrap().to_string();
    assert_eq!(header, "run_id,epoch,task,split,metric_name,value");
    assert!(sb.out().join("train/scalarization_s0/manifest.json").exists());
}

#[test]
fn pcgrad_manifest_records_one_backward_pass_per_task() {
    let sb = Sandbox::new("[method]\nname = \"pcgrad\"\n");
    sb.ok(&["train"]);
    let m = json(&sb.read("train/pcgrad_s0/manifest.json"));
    assert_eq!(m["method"], "pcgrad");
    assert_eq!(m["cost"]["backward_passes"], 2);
    let params = m["param_count"].as_u64().unwrap();
    assert_eq!(m["cost"]["stored_gradient_values"].as_u64().unwrap(), 2 * params);
}

#[test]
fn repeated_runs_are_identical() {
    let sb = Sandbox::new("");
    sb.ok(&["train", "--run-id", "a"]);
    sb.ok(&["train", "--run-id", "b"]);
    let a = sb.read("train/a/metrics.csv").replace("a,", "");
    let b = sb.read("train/b/metrics.csv").replace("b,", "");
    assert_eq!(a, b);
}

#[test]
fn seed_flag_controls_every_stochastic_choice() {
    let sb = Sandbox::new("");
    sb.ok(&["train", "--seed", "7", "--run-id", "a"]);
    sb.ok(&["train", "--seed", "7", "--run-id", "b"]);
    sb.ok(&["train", "--seed", "8", "--run-id", "c"]);
    let values = |id: &str| -> Vec<String> {
        csv_rows(&sb.read(&format!("train/{id}/metrics.csv")))
            .into_iter()
            .map(|r| r["value"].clone())
            .collect()
    };
    assert_eq!(values("a"), values("b"));
    assert_ne!(values("a"), values("c"));
    let m = json(&sb.read("train/a/manifest.json"));
    assert_eq!(m["train"]["seed"], 7);
    assert_eq!(m["dataset"]["source"]["seed"], 7);
    assert_eq!(m["dataset"]["split_seed"], 7);
}

#[test]
fn sweep_writes_one_directory_per_run_and_report_agrees() {
    let sb = Sandbox::new("[sweep]\npoints = 3\n");
    sb.ok(&["sweep"]);
    let runs = dirs_in(&sb.out().join("sweep/runs"));
    assert_eq!(runs.len(), 6, "{runs:?}");
    let summary = json(&sb.read("sweep/summary.json"));
    assert_eq!(summary["sweeps"].as_array().unwrap().len(), 1);

    sb.ok(&["report"]);
    let report = csv_rows(&sb.read("sweep/report.csv"));
    assert_eq!(report.len(), 3);
    let best: Vec<_> = report.iter().filter(|r| r["best"] == "true").collect();
    assert_eq!(best.len(), 1);
    let stored = &summary["sweeps"][0];
    let stored_best = stored["best"].as_u64().unwrap() as usize;
    assert_eq!(best[0]["point"], stored_best.to_string());
    let p0: f64 = best[0]["p0"].parse().unwrap();
    assert_eq!(p0, stored["points"][stored_best]["weights"][0].as_f64().unwrap());
}

#[test]
fn report_detects_a_tampered_summary() {
    let sb = Sandbox::new("[sweep]\npoints = 3\n");
    sb.ok(&["sweep"]);
    let path = sb.out().join("sweep/summary.json");
    let mut summary = json(&std::fs::read_to_string(&path).unwrap());
    let best = summary["sweeps"][0]["best"].as_u64().unwrap();
    summary["sweeps"][0]["best"] = serde_json::json!((best + 1) % 3);
    std::fs::write(&path, serde_json::to_string(&summary).unwrap()).unwrap();
    let out = sb.run(&["report"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn include_vertices_adds_single_source_endpoints() {
    let sb = Sandbox::new("[sweep]\ngrid = [[0.3, 0.7], [0.6, 0.4]]\n");
    sb.ok(&["sweep", "--include-vertices", "--set", "training.seeds=[0]"]);
    let summary = json(&sb.read("sweep/summary.json"));
    let grid: Vec<Vec<f64>> = serde_json::from_value(summary["grid"].clone()).unwrap();
    assert_eq!(grid.len(), 4);
    assert!(grid.contains(&vec![1.0, 0.0]));
    assert!(grid.contains(&vec![0.0, 1.0]));
    assert_eq!(dirs_in(&sb.out().join("sweep/runs")).len(), 4);
}

#[test]
fn sd_baselines_produce_plot_tables() {
    let sb = Sandbox::new("[sweep]\npoints = 3\nsd_baselines = true\nwidth_multipliers = [0.5, 1.0]\n");
    sb.ok(&["sweep", "--set", "training.seeds=[0]", "--jobs", "2"]);
    let delta = csv_rows(&sb.read("sweep/delta.csv"));
    assert_eq!(delta.len(), 2 * 2);
    let tradeoff = csv_rows(&sb.read("sweep/tradeoff.csv"));
    assert_eq!(tradeoff.len(), 2 * 3);
    sb.ok(&["export"]);
    assert_eq!(csv_rows(&sb.read("plots/delta_heatmap.csv")).len(), 4);
    assert_eq!(csv_rows(&sb.read("plots/tradeoff_scatter.csv")).len(), 6);
}

#[test]
fn pbt_policy_replays_to_identical_metrics() {
    let sb = Sandbox::new("[pbt]\npopulation = 4\nready_epochs = 1\n");
    sb.ok(&["pbt", "--rank-split", "0.3"]);
    for f in ["pbt/search.json", "pbt/search_policy.json", "pbt/policy.json", "pbt/retrain/manifest.json"] {
        assert!(sb.out().join(f).exists(), "{f}");
    }
    assert_eq!(dirs_in(&sb.out().join("pbt/members")).len(), 4);
    let manifest = json(&sb.read("pbt/retrain/manifest.json"));
    assert_eq!(manifest["method"], "pbt");
    let notes = manifest["notes"][0].as_str().unwrap();
    assert!(notes.contains("holdout fraction 0.3"), "{notes}");

    let policy = sb.out().join("pbt/policy.json");
    sb.ok(&["train", "--policy", policy.to_str().unwrap(), "--run-id", "pbt_retrain"]);
    assert_eq!(sb.read("pbt/retrain/metrics.csv"), sb.read("train/pbt_retrain/metrics.csv"));
}

#[test]
fn conflict_profile_writes_per_epoch_fractions() {
    let sb = Sandbox::new("");
    sb.ok(&["profile", "conflicts"]);
    let rows = csv_rows(&sb.read("profile/conflicts.csv"));
    assert_eq!(rows.len(), 3);
    for r in &rows {
        let f: f64 = r["fraction"].parse().unwrap();
        assert!((0.0..=1.0).contains(&f));
    }
    sb.ok(&["export"]);
    assert!(sb.out().join("plots/conflict_curves.csv").exists());
}

#[test]
fn memory_profile_has_one_row_per_method() {
    let sb = Sandbox::new("");
    sb.ok(&["profile", "memory"]);
    let rows = csv_rows(&sb.read("profile/memory.csv"));
    assert_eq!(rows.len(), 6);
    let stored = |name: &str| -> u64 {
        rows.iter().find(|r| r["method"] == name).unwrap()["stored_gradient_values"].parse().unwrap()
    };
    assert_eq!(stored("pcgrad"), 2 * stored("scalarization"));
}

#[test]
fn variance_analysis_matches_hand_computation() {
    let sb = Sandbox::new("[profile.grid]\nlearning_rate = [0.01, 0.05, 0.1]\nseed = [0, 1]\n");
    sb.ok(&["profile", "conflicts"]);
    let runs = csv_rows(&sb.read("profile/grid_runs.csv"));
    assert_eq!(runs.len(), 6 * 3);
    let mut avg: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in &runs {
        avg.entry((r["learning_rate"].clone(), r["seed"].clone()))
            .or_default()
            .push(r["fraction"].parse().unwrap());
    }
    let avg: BTreeMap<(String, String), f64> =
        avg.into_iter().map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64)).collect();
    let pop_var = |xs: &[f64]| {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
    };
    let median = |mut v: Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        }
    };
    let lrs = ["0.01", "0.05", "0.1"];
    let seeds = ["0", "1"];
    let across_lr = median(
        seeds
            .iter()
            .map(|s| pop_var(&lrs.iter().map(|l| avg[&(l.to_string(), s.to_string())]).collect::<Vec<_>>()))
            .collect(),
    );
    let across_seed = median(
        lrs.iter()
            .map(|l| pop_var(&seeds.iter().map(|s| avg[&(l.to_string(), s.to_string())]).collect::<Vec<_>>()))
            .collect(),
    );
    let table = csv_rows(&sb.read("profile/variance.csv"));
    assert_eq!(table.len(), 2);
    let get = |axis: &str| -> f64 { table.iter().find(|r| r["axis"] == axis).unwrap()["median_variance"].parse().unwrap() };
    assert!((get("learning_rate") - across_lr).abs() < 1e-12);
    assert!((get("seed") - across_seed).abs() < 1e-12);
}

#[test]
fn datagen_output_loads_as_a_csv_dataset() {
    let sb = Sandbox::new("");
    sb.ok(&["datagen"]);
    let schema = sb.read("data/schema.json");
    let data = sb.out().join("data/dataset.csv");
    let config = format!(
        "[dataset.source]\nkind = \"csv\"\npath = {:?}\nschema = {schema}\n\n[training]\nepochs = 1\n",
        data.to_str().unwrap()
    );
    let schema_toml: toml::Value = serde_json::from_str(&schema).unwrap();
    let config = config.replace(&format!("schema = {schema}"), &format!("schema = {}", inline(&schema_toml)));
    std::fs::write(sb.dir.path().join("exp.toml"), config).unwrap();
    sb.ok(&["train"]);
    let rows = csv_rows(&sb.read("train/scalarization_s0/metrics.csv"));
    assert_eq!(rows.iter().filter(|r| r["split"] == "train").count(), 2);
}

fn inline(v: &toml::Value) -> String {
    match v {
        toml::Value::Table(t) => {
            let parts: Vec<String> = t.iter().map(|(k, v)| format!("{k} = {}", inline(v))).collect();
            format!("{{ {} }}", parts.join(", "))
        }
        toml::Value::Array(a) => format!("[{}]", a.iter().map(inline).collect::<Vec<_>>().join(", ")),
        other => other.to_string(),
    }
}

#[test]
fn unknown_keys_fail_with_the_field_path() {
    let sb = Sandbox::new("[training.optimizer]\nlr = 0.1\n");
    let out = sb.run(&["train"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("training.optimizer"), "{err}");
    assert!(err.contains("lr"), "{err}");
    assert!(!sb.out().exists());
}

#[test]
fn bad_overrides_and_usage_errors_exit_with_one() {
    let sb = Sandbox::new("");
    assert_eq!(sb.run(&["train", "--set", "training.epochs=-3"]).status.code(), Some(1));
    assert_eq!(sb.run(&["train", "--set", "noequals"]).status.code(), Some(1));
    assert_eq!(sb.run(&["profile", "nonsense"]).status.code(), Some(1));
}

#[test]
fn missing_config_file_is_an_io_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_scalweight"))
        .args(["train", "/nonexistent/exp.toml"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn divergence_exits_with_two() {
    let sb = Sandbox::new("");
    let out = sb.run(&["train", "--set", "training.optimizer.learning_rate=1e300"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn output_root_comes_from_the_environment() {
    let sb = Sandbox::new("[output]\ndir = \"elsewhere\"\n");
    sb.ok(&["train"]);
    assert!(sb.out().join("train/scalarization_s0/metrics.csv").exists());
    assert!(!sb.dir.path().join("elsewhere").exists());
}
