use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use korder_core::graph::synthetic::{complete_graphs, rings_and_trees};
use korder_core::graph::write_tu_dataset;
use serde_json::Value;

fn korder(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_korder"))
        .args(args)
        .env_remove("KORDER_DATA_ROOT")
        .output()
        .expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

struct Corpus {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

fn corpus() -> Corpus {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    write_tu_dataset(&rings_and_trees(60, 3), root.join("RINGS"), "RINGS").unwrap();
    write_tu_dataset(&complete_graphs(20, 4), root.join("COMPLETE"), "COMPLETE").unwrap();
    Corpus { _dir: dir, root }
}

fn out_dir(c: &Corpus, name: &str) -> PathBuf {
    c.root.parent().unwrap().join("runs").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn strip_timing(mut report: Value) -> Value {
    let obj = report.as_object_mut().unwrap();
    obj.remove("seconds_per_epoch");
    obj.remove("total_seconds");
    for seed in obj["per_seed"].as_array_mut().unwrap() {
        seed.as_object_mut().unwrap().remove("seconds");
    }
    report
}

#[test]
fn verify_passes_on_a_clean_build() {
    let out = korder(&["verify"]);
    let stdout = text(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}");
    assert!(stdout.contains("PASS gradient/network"));
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn verify_names_a_corrupted_gradient() {
    let out = korder(&["verify", "--corrupt-gradient", "segment_max"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stdout).contains("FAIL gradient/segment_max"));
    assert!(text(&out.stderr).contains("gradient/segment_max"));
}

#[test]
fn analyze_writes_curve_and_fit() {
    let c = corpus();
    let out_path = out_dir(&c, "analyze");
    let out = korder(&["analyze", "--dataset", "RINGS", "--data-root", s(&c.root), "--kmax", "6", "--out", s(&out_path)]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("k_hat = "));

    let curve = std::fs::read_to_string(out_path.join("ig_curve.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("k,ig"));
    assert_eq!(curve.lines().count(), 8);
    let fit = read_json(&out_path.join("fit.json"));
    for key in ["dataset", "a", "b", "r2", "mse", "k_hat", "epsilon", "loss_achieved"] {
        assert!(fit.get(key).is_some(), "missing {key}");
    }
    assert_eq!(fit["fit_range"], serde_json::json!([2, 6]));
}

#[test]
fn zero_gain_corpus_fails_cleanly() {
    let c = corpus();
    let out_path = out_dir(&c, "complete");
    let out = korder(&["analyze", "--dataset", "COMPLETE", "--data-root", s(&c.root), "--out", s(&out_path)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("fit failed"));
    let curve = std::fs::read_to_string(out_path.join("ig_curve.csv")).unwrap();
    for line in curve.lines().skip(3) {
        let ig: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(ig, 0.0, "{line}");
    }
}

#[test]
fn dataset_directory_can_be_given_directly() {
    let c = corpus();
    let out_path = out_dir(&c, "direct");
    let dir = c.root.join("RINGS");
    let out = korder(&["analyze", "--dataset", s(&dir), "--kmax", "4", "--out", s(&out_path)]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
}

#[test]
fn usage_errors_exit_with_two() {
    let c = corpus();
    let root = s(&c.root);
    for args in [
        vec!["analyze", "--dataset", "RINGS", "--data-root", root, "--epsilon", "1.5"],
        vec!["analyze", "--data-root", root],
        vec!["train", "--dataset", "RINGS", "--data-root", root, "--layers", "0"],
        vec!["train", "--dataset", "RINGS", "--data-root", root, "--rho-v", "0"],
        vec!["train", "--dataset", "RINGS", "--conv", "gcn"],
        vec!["train", "--data-root", root],
        vec!["frobnicate"],
    ] {
        let out = korder(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", text(&out.stderr));
    }
    let cfg = c.root.join("bad.json");
    std::fs::write(&cfg, r#"{"dataset": "RINGS", "learning_rate": 0.1}"#).unwrap();
    let out = korder(&["train", "--config", s(&cfg), "--data-root", root]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_dataset_is_a_run_failure() {
    let c = corpus();
    let out = korder(&["train", "--dataset", "NOPE", "--data-root", s(&c.root), "--seeds", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("NOPE"));
}

#[test]
fn train_smoke_run_is_reproducible() {
    let c = corpus();
    let run = |name: &str| {
        let out_path = out_dir(&c, name);
        let out = korder(&[
            "train", "--dataset", "RINGS", "--data-root", s(&c.root), "--conv", "licheb", "--k", "2", "--no-pool",
            "--seeds", "1", "--hidden", "16", "--layers", "2", "--max-epochs", "5", "--out", s(&out_path),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
        out_path
    };
    let first = run("train-a");
    let report = read_json(&first.join("report.json"));
    for key in ["dataset", "config", "per_seed", "mean", "std", "params", "seconds_per_epoch", "total_seconds"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    assert_eq!(report["per_seed"].as_array().unwrap().len(), 1);
    assert_eq!(report["model"], "LiCheb");
    assert_eq!(report["config"]["pool_nodes"], false);

    let csv = std::fs::read_to_string(first.join("report.csv")).unwrap();
    assert!(csv.starts_with("model,Pro,D&D,NCI1,NCI109,Mut,Far,dataset,params,time\n"));

    let second = run("train-b");
    assert_eq!(strip_timing(report), strip_timing(read_json(&second.join("report.json"))));
}

#[test]
fn flags_override_the_config_file() {
    let c = corpus();
    let cfg = c.root.join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"dataset": "RINGS", "k": 3, "layers": 1, "hidden": 8, "max_epochs": 3, "seeds": [0, 1, 2], "rho_v": 0.5}"#,
    )
    .unwrap();
    let out_path = out_dir(&c, "config");
    let out = korder(&["train", "--config", s(&cfg), "--data-root", s(&c.root), "--k", "1", "--no-edge-pool", "--out", s(&out_path)]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let report = read_json(&out_path.join("report.json"));
    let config = &report["config"];
    assert_eq!(config["k"], 1);
    assert_eq!(config["hidden"], 8);
    assert_eq!(config["rho_v"], 0.5);
    assert_eq!(config["rho_e"], 0.9);
    assert_eq!(config["pool_edges"], false);
    assert_eq!(report["per_seed"].as_array().unwrap().len(), 3);
    assert_eq!(report["model"], "LiCheb(NF+pN)");
}
