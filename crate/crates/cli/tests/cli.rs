use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use projnet::format::load_model;
use projnet::harness::experiment::{DEFAULT_EPOCHS, STAGE_ONE_EPOCHS};
use projnet::harness::study::{pretrain_seed, StudyConfig};
use projnet::harness::MetricsLog;
use projnet::projection::count_params;
use tempfile::TempDir;

const TRAIN: &str = "48";
const TEST: &str = "24";

fn projnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_projnet")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = projnet(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

fn desk_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn pretrain(dir: &Path, epochs: &str) -> (PathBuf, PathBuf) {
    let (model, metrics) = (dir.join("pre.pnet"), dir.join("pre.csv"));
    ok(&[
        "pretrain",
        "--arch",
        s(&desk_config()),
        "--data",
        "synthetic",
        "--train-samples",
        TRAIN,
        "--test-samples",
        TEST,
        "--epochs",
        epochs,
        "--out",
        s(&model),
        "--metrics",
        s(&metrics),
        "--no-timing",
        "--seed",
        "3",
    ]);
    (model, metrics)
}

fn transfer(model: &Path, metrics: &Path, schedule: &[&str]) -> String {
    let mut args = vec![
        "transfer",
        "--model",
        s(model),
        "--data",
        "synthetic",
        "--train-samples",
        TRAIN,
        "--test-samples",
        TEST,
        "--metrics",
        s(metrics),
        "--no-timing",
    ];
    args.extend_from_slice(schedule);
    ok(&args)
}

#[test]
fn verify_passes_and_writes_report() {
    let dir = TempDir::new().unwrap();
    let report = dir.path().join("report.json");
    let stdout = ok(&["verify", "--out", s(&report)]);
    assert!(stdout.contains("overall: PASS"));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["overall_pass"], true);
    assert!(json["checks"].as_array().unwrap().iter().all(|r| r["pass"] == true));
    assert!(json["controls"].as_array().unwrap().iter().all(|r| r["pass"] == false));
}

#[test]
fn usage_errors_exit_two_and_runtime_errors_exit_one() {
    assert_eq!(projnet(&["verify", "--bogus"]).status.code(), Some(2));
    assert_eq!(
        projnet(&["transfer", "--model", "m.pnet", "--data", "synthetic", "--metrics", "m.csv"]).status.code(),
        Some(2)
    );
    let missing = projnet(&["params", "--model", "/nonexistent/model.pnet"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/nonexistent/model.pnet"));
    let dir = TempDir::new().unwrap();
    let junk = dir.path().join("junk.pnet");
    std::fs::write(&junk, b"not a model").unwrap();
    assert_eq!(projnet(&["params", "--model", s(&junk)]).status.code(), Some(1));
}

#[test]
fn cli_pretraining_matches_the_library_study() {
    let dir = TempDir::new().unwrap();
    let (model, metrics) = pretrain(dir.path(), "2");
    let cfg = StudyConfig {
        pretrain_samples: TRAIN.parse().unwrap(),
        pretrain_test_samples: TEST.parse().unwrap(),
        pretrain_epochs: 2,
        timing: false,
        ..StudyConfig::default()
    };
    let (lib_model, lib_log) = pretrain_seed(&cfg, 3).unwrap();
    assert_eq!(MetricsLog::read_csv(&metrics).unwrap(), lib_log);
    let bits = |m: &projnet::model::Model| m.theta().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&load_model(&model).unwrap()), bits(&lib_model));
}

#[test]
fn transfer_logs_every_epoch_and_repeats_bit_identically() {
    let dir = TempDir::new().unwrap();
    let (model, _) = pretrain(dir.path(), "1");
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    let stdout = transfer(&model, &a, &["--regime", "projection"]);
    assert!(stdout.contains("\"shuffle\":true"), "{stdout}");
    transfer(&model, &b, &["--regime", "projection"]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let log = MetricsLog::read_csv(&a).unwrap();
    assert_eq!(log.rows.len(), DEFAULT_EPOCHS + 1);
    assert!(log.rows.iter().enumerate().all(|(i, r)| r.epoch == i && r.regime == "projection" && r.wall_ms == 0));
}

#[test]
fn two_stage_transfer_switches_regime_after_stage_one() {
    let dir = TempDir::new().unwrap();
    let (model, _) = pretrain(dir.path(), "1");
    let metrics = dir.path().join("two.csv");
    let out = dir.path().join("two.pnet");
    transfer(&model, &metrics, &["--two-stage", "proj+ft", "--out", s(&out)]);
    let log = MetricsLog::read_csv(&metrics).unwrap();
    assert_eq!(log.rows.len(), DEFAULT_EPOCHS + 1);
    for r in &log.rows[1..] {
        let first = r.epoch <= STAGE_ONE_EPOCHS;
        assert_eq!(r.stage, if first { 1 } else { 2 }, "epoch {}", r.epoch);
        assert_eq!(r.regime, if first { "projection" } else { "ft" }, "epoch {}", r.epoch);
    }
    assert!(log.rows[STAGE_ONE_EPOCHS].trainable_params < log.rows[STAGE_ONE_EPOCHS + 1].trainable_params);
    let mismatch = projnet(&[
        "transfer",
        "--model",
        s(&model),
        "--data",
        "synthetic",
        "--metrics",
        s(&metrics),
        "--regime",
        "lr",
        "--two-stage",
        "proj+ft",
    ]);
    assert_eq!(mismatch.status.code(), Some(1));
}

#[test]
fn project_then_params_reports_the_projected_audit() {
    let dir = TempDir::new().unwrap();
    let (model, _) = pretrain(dir.path(), "1");
    let projected = dir.path().join("proj.pnet");
    let csv = dir.path().join("audit.csv");
    ok(&["project", "--model", s(&model), "--out", s(&projected)]);
    let stdout = ok(&["params", "--model", s(&projected), "--csv", s(&csv)]);
    let audit = count_params(&load_model(&projected).unwrap());
    assert_eq!(stdout.trim_end(), audit.to_string().trim_end());
    assert_eq!(std::fs::read_to_string(&csv).unwrap(), audit.to_csv_string().unwrap());
}
