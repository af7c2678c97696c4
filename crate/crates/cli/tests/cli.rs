use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dedn_core::trainer::load_checkpoint;
use serde_json::Value;

fn dedn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dedn")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_data(dir: &Path) -> String {
    let data = dir.join("data");
    let out = dedn(&[
        "gen-synth", "--out", p(&data), "--seed", "3", "--n-per-class", "8", "--k-seen", "4", "--k-unseen", "2",
        "--c", "4", "--h", "2", "--w", "2", "--d", "6", "--g", "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data.to_str().unwrap().to_owned()
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let clusters = dir.path().join("clusters.json");
    let out = dedn(&["cluster", "--data", &data, "--k", "2", "--out", p(&clusters)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let parsed: Value = serde_json::from_str(&fs::read_to_string(&clusters).unwrap()).unwrap();
    assert_eq!(parsed.as_array().map(Vec::len), Some(2));

    let ckpt = dir.path().join("m.ckpt");
    let log = dir.path().join("log.jsonl");
    let out = dedn(&[
        "train", "--data", &data, "--clusters", p(&clusters), "--out", p(&ckpt), "--log", p(&log), "--epochs",
        "4", "--batch-size", "8", "--quiet",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let lines: Vec<Value> = fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4);
    assert!(lines.iter().all(|l| l["mean_total"].as_f64().unwrap().is_finite()));

    let report = dir.path().join("report.json");
    let out = dedn(&["eval", "--data", &data, "--model", p(&ckpt), "--out", p(&report)]);
    assert_eq!(out.status.code(), Some(0));
    let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["t", "u", "s", "h"] {
        let v = r[key].as_f64().unwrap();
        assert!((0.0..=100.0).contains(&v), "{key} = {v}");
    }

    let stdout = dedn(&["eval", "--data", &data, "--model", p(&ckpt), "--mode", "zsl"]);
    assert_eq!(stdout.status.code(), Some(0));
    let z: Value = serde_json::from_slice(&stdout.stdout).unwrap();
    assert_eq!(z["t"], r["t"]);

    let csv = dir.path().join("att.csv");
    let out = dedn(&["export-attention", "--data", &data, "--model", p(&ckpt), "--sample", "0", "--out", p(&csv)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 2 * 7);

    let out = dedn(&["export-attention", "--data", &data, "--model", p(&ckpt), "--sample", "999", "--out", p(&csv)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn flags_override_config_file_over_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let clusters = dir.path().join("clusters.json");
    fs::write(&clusters, "[[0, 1, 2], [3, 4, 5]]").unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"epochs": 2, "lr": 0.002, "weights": {"gamma": 0.5}}"#).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let out = dedn(&[
        "train", "--data", &data, "--clusters", p(&clusters), "--config", p(&cfg), "--out", p(&ckpt), "--lr",
        "0.003", "--quiet",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let (model, saved) = load_checkpoint(&ckpt).unwrap();
    assert_eq!(saved.lr, 0.003);
    assert_eq!(saved.epochs, 2);
    assert_eq!(saved.weights.gamma, 0.5);
    assert_eq!(saved.batch_size, 50);
    assert_eq!(model.partition.sizes(), vec![3, 3]);
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let out_path = dir.path().join("c.json");
    for args in [
        vec!["cluster", "--data", &data, "--k", "0", "--out", p(&out_path)],
        vec!["cluster", "--data", &data, "--out", p(&out_path)],
        vec!["cluster", "--data", &data, "--k", "2", "--bogus", "--out", p(&out_path)],
        vec!["no-such-command"],
    ] {
        let out = dedn(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stderr).to_lowercase().contains("usage"), "{args:?}");
    }
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"lr": -1}"#).unwrap();
    let out = dedn(&["train", "--data", &data, "--config", p(&cfg), "--out", p(&out_path)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let out = dedn(&["cluster", "--data", p(&missing), "--k", "2", "--out", p(&dir.path().join("c.json"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn gradcheck_passes() {
    let out = dedn(&["gradcheck", "--seed", "1", "--instances", "1"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    for name in ["align", "distill", "cross_entropy", "margin_aware", "total"] {
        assert!(text.contains(name), "{text}");
    }
}
