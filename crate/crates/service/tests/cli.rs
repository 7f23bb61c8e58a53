use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn evicon(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evicon"))
        .arg("--data-dir")
        .arg(dir)
        .args(args)
        .env_remove("EVICON_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn json(dir: &Path, args: &[&str]) -> Value {
    let mut full = vec!["--json"];
    full.extend_from_slice(args);
    let out = evicon(dir, &full);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{args:?} printed non-JSON: {e}"))
}

#[test]
fn small_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let summary = json(dir, &["syngen", "--tags", "4", "--per-tag", "12", "--workers", "20"]);
    assert_eq!(summary["icons"], 48);
    assert_eq!(summary["planted_spam"], summary["rejected_spam"]);
    for file in ["icons.jsonl", "ratings.csv"] {
        assert!(dir.join(file).exists(), "{file} missing");
    }

    let manifest = json(dir, &["curate", "--k", "3", "--per-cluster", "2"]);
    assert!(dir.join("manifest.json").exists());
    assert!(!manifest["selected"].as_array().unwrap().is_empty());

    json(dir, &["train-embedding", "--epochs", "2"]);
    json(dir, &["train-predictor", "--epochs", "2", "--hidden", "16"]);
    let retrieval = json(dir, &["eval", "retrieval"]);
    let map = retrieval["map_at_k"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));
    let eval = json(dir, &["eval", "predictor"]);
    assert_eq!(eval["train"]["heads"].as_array().unwrap().len(), 2);

    let icons = std::fs::read_to_string(dir.join("icons.jsonl")).unwrap();
    let set: Vec<&str> = icons.lines().take(3).collect();
    let set_path = dir.join("set.jsonl");
    std::fs::write(&set_path, set.join("\n")).unwrap();
    let scored = json(dir, &["score", "--set", set_path.to_str().unwrap()]);
    let scored = scored.as_array().expect("one entry per icon");
    assert_eq!(scored.len(), 3);
    assert_eq!(scored.iter().filter(|s| s["best"] == true).count(), 1);
}

#[test]
fn failures_exit_with_status_one() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = evicon(tmp.path(), &["score", "--set", "no-such-set.json"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(!missing.stderr.is_empty());

    let untrained = evicon(tmp.path(), &["eval", "predictor"]);
    assert_eq!(untrained.status.code(), Some(1));
}
