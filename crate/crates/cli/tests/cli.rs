//! End-to-end behavior of the `memgauge` binary on a tiny synthetic run.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use memgauge::commands::{MethodAnalysis, Overview};
use serde_json::Value;

const TINY: &str = r#"{
  "run_id": "tiny",
  "seed": 3,
  "dataset": {
    "source": "synthetic",
    "longtail": {
      "n_subpopulations": 4,
      "frequency_exponent": 1.0,
      "n_classes": 2,
      "n_features": 4,
      "cluster_spread": 0.3,
      "train_size": 120,
      "test_size": 40,
      "label_noise": 0.05
    }
  },
  "model": {
    "architecture": "mlp",
    "layer_widths": [8],
    "activation": "relu",
    "train": { "epochs": 3, "batch_size": 16, "learning_rate": 0.1, "momentum": 0.9 }
  },
  "estimator": { "trials": 6, "mask_prob": 0.7 },
  "compression": [{ "method": "prune", "sparsity": 0.5 }]
}"#;

struct Fixture {
    _dir: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("tiny.json");
        std::fs::write(&config, TINY).unwrap();
        let out = dir.path().join("runs");
        Self { _dir: dir, config, out }
    }

    fn run_dir(&self) -> PathBuf {
        self.out.join("tiny")
    }

    fn cmd(&self, sub: &str, extra: &[&str]) -> Output {
        let mut args = vec![
            sub,
            "--config",
            self.config.to_str().unwrap(),
            "--out",
            self.out.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        memgauge(&args)
    }
}

fn memgauge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memgauge"))
        .args(args)
        .env_remove("MEMGAUGE_SEED")
        .output()
        .unwrap()
}

fn ok(out: Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap_or(Value::Null)
}

fn error_json(out: &Output) -> Value {
    let line = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(line.trim()).unwrap_or_else(|e| panic!("stderr is not one JSON line ({e}): {line}"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let f = Fixture::new();
    let est = ok(f.cmd("estimate", &["--jobs", "2"]));
    assert_eq!(est["summary"]["trials_completed"], 6);
    ok(f.cmd("compress", &[]));
    ok(f.cmd("analyze", &[]));
    let run = f.run_dir();
    let text = memgauge(&["report", "--run", run.to_str().unwrap()]);
    assert!(text.status.success());
    assert!(String::from_utf8_lossy(&text.stdout).contains("prune-s0.5"));
    for format in ["json", "csv", "svg"] {
        ok(memgauge(&["report", "--run", run.to_str().unwrap(), "--format", format]));
    }
    for rel in [
        "manifest.json",
        "config.json",
        "masks.bin",
        "influence_test.infl",
        "influence_train.infl",
        "memorization.json",
        "models/reference.mgpm",
        "models/prune-s0.5.mgpm",
        "reports/overview.json",
        "reports/prune-s0.5.analysis.json",
        "reports/report.txt",
        "reports/report.json",
        "reports/report.influence.csv",
        "reports/report.influence.svg",
    ] {
        assert!(run.join(rel).is_file(), "missing {rel}");
    }
    let manifest: Value = read_json(&run.join("manifest.json"));
    let commands: Vec<&str> = manifest["entries"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["command"].as_str().unwrap())
        .collect();
    assert_eq!(commands, ["estimate", "compress", "analyze", "report", "report", "report", "report"]);
    let overview: Overview = read_json(&run.join("reports/overview.json"));
    assert_eq!((overview.n_train, overview.n_test), (120, 40));
}

#[test]
fn estimate_resumes_only_missing_trials() {
    let f = Fixture::new();
    ok(f.cmd("estimate", &[]));
    let infl = std::fs::read(f.run_dir().join("influence_test.infl")).unwrap();
    std::fs::remove_file(f.run_dir().join("trials/trial_00003.bits")).unwrap();
    let again = ok(f.cmd("estimate", &[]));
    assert_eq!(again["summary"]["trials_run"], 1);
    assert_eq!(std::fs::read(f.run_dir().join("influence_test.infl")).unwrap(), infl);
    let rerun = ok(f.cmd("estimate", &[]));
    assert_eq!(rerun["summary"]["trials_run"], 0);
}

#[test]
fn too_few_trials_is_a_usage_error() {
    let f = Fixture::new();
    let out = f.cmd("estimate", &["--trials", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["exit_code"], 2);
    let out = f.cmd("estimate", &["--estimator.mask_prob", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn changed_config_needs_a_new_run_id() {
    let f = Fixture::new();
    ok(f.cmd("estimate", &[]));
    let out = f.cmd("estimate", &["--epochs", "4"]);
    assert_eq!(out.status.code(), Some(2));
    ok(f.cmd("estimate", &["--epochs", "4", "--run-id", "tiny-e4"]));
    assert!(f.out.join("tiny-e4/influence_test.infl").is_file());
}

#[test]
fn quantize_flag_bounds_distinct_values() {
    let f = Fixture::new();
    ok(f.cmd("estimate", &[]));
    let out = ok(f.cmd("compress", &["--method", "quantize", "--bits", "4"]));
    let label = out["models"][0]["label"].as_str().unwrap().to_string();
    let meta: Value = read_json(&f.run_dir().join(format!("models/{label}.json")));
    for d in meta["distinct_values_per_tensor"].as_array().unwrap() {
        assert!(d.as_u64().unwrap() <= 16);
    }
}

#[test]
fn adaptive_prune_then_distill_keeps_pruned_weights_at_zero() {
    let f = Fixture::new();
    ok(f.cmd("estimate", &[]));
    let out = ok(f.cmd(
        "compress",
        &["--method", "prune_then_distill", "--sparsity", "0.6", "--adaptive", "--distill-epochs", "3"],
    ));
    assert!(out["models"][0]["achieved_sparsity"].as_f64().unwrap() >= 0.6);
    let bad = f.cmd("compress", &["--method", "prune", "--sparsity", "0.5", "--bits", "4"]);
    assert_eq!(bad.status.code(), Some(2));
    let bad = f.cmd("compress", &["--method", "distill", "--window", "3"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn analyze_without_artifacts_reports_missing() {
    let f = Fixture::new();
    let out = f.cmd("analyze", &[]);
    assert_eq!(out.status.code(), Some(4));
    ok(f.cmd("estimate", &[]));
    let out = f.cmd("analyze", &[]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_json(&out)["exit_code"], 4);
}

#[test]
fn unknown_report_format_is_a_usage_error() {
    let f = Fixture::new();
    let out = memgauge(&["report", "--run", f.run_dir().to_str().unwrap(), "--format", "xml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unpruned_model_has_no_cies() {
    let f = Fixture::new();
    ok(f.cmd("estimate", &[]));
    ok(f.cmd("compress", &["--method", "prune", "--sparsity", "0"]));
    ok(f.cmd("analyze", &[]));
    let a: MethodAnalysis = read_json(&f.run_dir().join("reports/prune-s0.analysis.json"));
    assert_eq!(a.cie_report.counts.cie, 0);
    assert_eq!(a.cie_report.counts.non_cie, 40);
    assert!(a.tests.iter().all(|t| t.result.is_none() && t.notice.is_some()));
    ok(memgauge(&["report", "--run", f.run_dir().to_str().unwrap()]));
}

#[test]
fn environment_seed_is_overridden_by_flag() {
    let f = Fixture::new();
    let run = |env: &str, extra: &[&str]| {
        let mut args = vec![
            "estimate",
            "--config",
            f.config.to_str().unwrap(),
            "--out",
            f.out.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        Command::new(env!("CARGO_BIN_EXE_memgauge"))
            .args(&args)
            .env("MEMGAUGE_SEED", env)
            .output()
            .unwrap()
    };
    ok(run("11", &["--run-id", "env"]));
    ok(run("11", &["--run-id", "flag", "--seed", "12"]));
    let seed = |id: &str| read_json::<Value>(&f.out.join(id).join("manifest.json"))["master_seed"].clone();
    assert_eq!(seed("env"), 11);
    assert_eq!(seed("flag"), 12);
}
