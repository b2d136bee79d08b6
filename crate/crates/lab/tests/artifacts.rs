mod common;

use std::fs;

use cil_lab::runner::{self, Manifest, MANIFEST_JSON, RESULTS_CSV, RESULTS_JSON, TRAIN_LOG};
use cil_lab::{load_experiment, LabError, RunReport};
use common::{csv_accuracies, tiny_config};

#[test]
fn run_writes_consistent_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "icarl", "");
    let report = runner::run(&cfg, None).unwrap();
    let out = dir.path().join("out/icarl");
    for f in [RESULTS_JSON, RESULTS_CSV, MANIFEST_JSON, TRAIN_LOG] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let csv = fs::read_to_string(out.join(RESULTS_CSV)).unwrap();
    let accs = csv_accuracies(&csv);
    assert_eq!(Some(accs.len()), cfg.num_stages());
    assert_eq!(accs, report.result.stage_accuracies);

    let json = RunReport::load(&out.join(RESULTS_JSON)).unwrap();
    assert_eq!(json, report);
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert_eq!(json.result.average, mean);
    assert_eq!(json.seen_classes(), [2, 4, 6]);

    let log = fs::read_to_string(out.join(TRAIN_LOG)).unwrap();
    assert_eq!(log.lines().count(), 3 * cfg.optimizer.epochs);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["task"], 0);
    assert_eq!(first["phase"], "train");
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "bic", "");
    runner::run(&cfg, Some(&dir.path().join("a"))).unwrap();
    runner::run(&cfg, Some(&dir.path().join("b"))).unwrap();
    for f in [RESULTS_CSV, RESULTS_JSON, MANIFEST_JSON, TRAIN_LOG] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
}

#[test]
fn manifest_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "der", "");
    runner::run(&cfg, None).unwrap();
    let out = dir.path().join("out/der");
    let manifest = Manifest::load(&out.join(MANIFEST_JSON)).unwrap();
    assert_eq!(manifest.config, cfg);
    assert_eq!(manifest.seed, 1993);
    assert_eq!(manifest.code_version, env!("CARGO_PKG_VERSION"));

    let again = load_experiment(&out.join(MANIFEST_JSON)).unwrap();
    let rerun = dir.path().join("rerun");
    runner::run(&again, Some(&rerun)).unwrap();
    assert_eq!(
        fs::read(out.join(RESULTS_CSV)).unwrap(),
        fs::read(rerun.join(RESULTS_CSV)).unwrap()
    );
}

#[test]
fn tampered_manifest_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "finetune", "");
    runner::run(&cfg, None).unwrap();
    let path = dir.path().join("out/finetune").join(MANIFEST_JSON);
    let text = fs::read_to_string(&path).unwrap().replace("\"memory_size\": 24", "\"memory_size\": 30");
    fs::write(&path, text).unwrap();
    assert!(Manifest::load(&path).is_err());
}

#[test]
fn nothing_is_written_when_validation_fails() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path(), "replay", "");
    cfg.memory_size = 3;
    let err = runner::run(&cfg, None).unwrap_err();
    assert!(matches!(err, LabError::Invalid(_)), "{err}");
    assert!(!dir.path().join("out").exists());

    let mut cfg = tiny_config(dir.path(), "replay", "");
    cfg.dataset = serde_json::from_value(serde_json::json!({
        "kind": "csv",
        "train": dir.path().join("missing.csv"),
        "test": dir.path().join("missing.csv"),
        "header": false,
    }))
    .unwrap();
    assert!(runner::run(&cfg, None).is_err());
    assert!(!dir.path().join("out").exists());
}

#[test]
fn diverging_training_reports_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "finetune", "").clone();
    let mut cfg = cfg;
    cfg.optimizer.lr = 1e200;
    cfg.optimizer.momentum = 0.0;
    let err = runner::run(&cfg, None).unwrap_err();
    assert_eq!(err.kind(), "training");
    assert!(err.to_string().starts_with("stage 1:"), "{err}");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn csv_datasets_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let mut train = String::new();
    let mut test = String::new();
    for c in 0..4 {
        for i in 0..12 {
            let row = format!("{},{},{}\n", c as f64 * 3.0 + (i % 3) as f64 * 0.1, (i % 4) as f64 * 0.1 - c as f64, c);
            if i < 8 {
                train.push_str(&row);
            } else {
                test.push_str(&row);
            }
        }
    }
    fs::write(dir.path().join("train.csv"), train).unwrap();
    fs::write(dir.path().join("test.csv"), test).unwrap();
    let text = r#"algorithm = "replay"
memory_size = 8
init_cls = 2
increment = 1
convnet_type = "mlp-32"

[dataset]
kind = "csv"
train = "train.csv"
test = "test.csv"

[optimizer]
epochs = 2
batch_size = 4
"#.to_string();
    let path = common::write_config(dir.path(), "csv.toml", &text);
    let cfg = load_experiment(&path).unwrap();
    assert_eq!(cfg.num_stages(), None);
    let report = runner::run(&cfg, None).unwrap();
    assert_eq!(report.seen_classes(), [2, 3, 4]);
    assert!(dir.path().join("runs/replay").join(RESULTS_CSV).is_file());
}
