//! The binary's contract: exit codes, error JSON, run layout.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "dataset.n_train=12",
    "dataset.n_test=4",
    "scene.image_size=[48, 64]",
    "detector.width=2",
    "net.widths=[2, 2]",
    "pretrain.epochs=1",
    "hallucidet.epochs=1",
    "finetune.epochs=1",
    "recon.epochs=1",
];

fn run(out: &Path, args: &[&str], extra: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hallucidet"));
    cmd.args(args).args(["--seeds", "0", "--quiet"]).env("HALLUCIDET_OUT", out);
    for s in TINY.iter().chain(extra) {
        cmd.args(["--set", s]);
    }
    cmd.output().unwrap()
}

fn error_json(o: &Output) -> serde_json::Value {
    let err = String::from_utf8_lossy(&o.stderr);
    let line = err.lines().rev().find(|l| l.starts_with('{')).expect("error JSON on stderr");
    serde_json::from_str(line).unwrap()
}

#[test]
fn config_errors_exit_2_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["pretrain"], &["hallucidet.batch_size=0"]);
    assert_eq!(o.status.code(), Some(2));
    let j = error_json(&o);
    assert_eq!(j["exit_code"], 2);
    assert!(j["message"].as_str().unwrap().contains("batch"));

    let o = run(dir.path(), &["baseline", "--method", "sharpen"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_json(&o)["message"].as_str().unwrap().contains("sharpen"));

    let o = run(dir.path(), &["pretrain"], &["dataset.no_such_field=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("metrics.csv").exists());
}

#[test]
fn eval_without_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["eval", "--checkpoint", "missing.ckpt"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"], "missing_checkpoint");
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["pretrain"], &["pretrain.learning_rate=1e30", "pretrain.epochs=3"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(error_json(&o)["error"], "divergence");
}

#[test]
fn unmet_check_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["pretrain", "--check"], &["thresholds.min_modality_gap=2.0"]);
    assert_eq!(o.status.code(), Some(4));
    let j = error_json(&o);
    assert_eq!(j["error"], "check_failed");
    assert!(j["failures"][0].as_str().unwrap().contains("modality gap"));
    // Same run without --check succeeds and leaves its rows behind.
    let o = run(dir.path(), &["pretrain"], &["thresholds.min_modality_gap=2.0"]);
    assert!(o.status.success());
}

#[test]
fn run_layout_and_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["hallucidet", "--run-id", "h1"], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = dir.path().join("h1");
    for p in ["checkpoints/hallucinet-seed0.ckpt", "reports/metrics.csv", "reports/summary.json", "reports/summary.csv"] {
        assert!(run.join(p).exists(), "{p}");
    }
    let resolved = std::fs::read_to_string(run.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("command = \"hallucidet\""));
    // Replaying the resolved file reproduces the spec hash.
    let again = Command::new(env!("CARGO_BIN_EXE_hallucidet"))
        .args(["hallucidet", "--quiet", "--run-id", "h2", "--config"])
        .arg(run.join("config.resolved.toml"))
        .env("HALLUCIDET_OUT", dir.path())
        .output()
        .unwrap();
    assert!(again.status.success());
    let rows = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(rows.lines().count(), 2, "replay must upsert the same row:\n{rows}");

    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run.join("reports/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["groups"].as_array().unwrap().len(), 1);
}

#[test]
fn print_config_emits_parseable_toml() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["sweep-lambda", "--print-config", "--lambdas", "0,1,1;1,0,0"], &[]);
    assert!(o.status.success());
    let v: toml::Table = toml::from_str(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(v["command"].as_str(), Some("sweep-lambda"));
    assert_eq!(v["sweep"]["lambdas"].as_array().unwrap().len(), 2);
    assert!(!dir.path().join("metrics.csv").exists());
}

#[test]
fn report_rebuilds_tables_without_training() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(dir.path(), &["baseline", "--method", "invert", "--method", "gray"], &[]).status.success());
    let cache = || std::fs::read_dir(dir.path().join("cache")).unwrap().count();
    let before = cache();
    let o = run(dir.path(), &["report", "--run-id", "r"], &[]);
    assert!(o.status.success());
    assert_eq!(cache(), before);
    let text = std::fs::read_to_string(dir.path().join("r/reports/summary.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.contains("invert"));
}
