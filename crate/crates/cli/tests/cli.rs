//! Black-box checks of the `ltlab` binary: exit codes, error wording,
//! lock handling, and help output.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke_config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn ltlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ltlab")).args(args).output().expect("spawn ltlab")
}

fn run_stage(stage: &str, config: &Path, out: &Path) -> Output {
    ltlab(&[stage, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn smoke_pipeline_writes_one_summary_row_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    for stage in ["make-data", "train-teacher", "distill", "relabel", "calibrate", "eval"] {
        let out = run_stage(stage, &cfg, dir.path());
        assert!(out.status.success(), "{stage} failed: {}", stderr_of(&out));
    }
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert!(lines[0].starts_with("run_id,"), "summary header missing: {}", lines[0]);
    // smoke.toml lists two seeds.
    assert_eq!(lines.len(), 3, "expected header plus one row per seed:\n{summary}");

    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    // Header plus (classes x seeds) rows.
    assert_eq!(metrics.lines().count(), 1 + 5 * 2, "unexpected metrics shape:\n{metrics}");
}

#[test]
fn missing_upstream_artifact_exits_3_and_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    for stage in ["make-data", "train-teacher"] {
        let out = run_stage(stage, &cfg, dir.path());
        assert!(out.status.success(), "{stage} failed: {}", stderr_of(&out));
    }
    // eval requires distilled features that were never produced.
    let out = run_stage("eval", &cfg, dir.path());
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr_of(&out));
    let msg = stderr_of(&out);
    assert!(msg.contains("missing input artifact"), "unexpected stderr: {msg}");
    assert!(msg.contains("distilled_s1.feat.ltdt"), "should name the absent file: {msg}");
    assert!(msg.contains("distill"), "should name the producing stage: {msg}");
}

#[test]
fn unknown_config_field_exits_1_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.toml");
    let mut text = std::fs::read_to_string(smoke_config()).unwrap();
    text.push_str("\n[data.extra]\nwhatever = 1\n");
    std::fs::write(&cfg_path, text).unwrap();
    let out = run_stage("make-data", &cfg_path, dir.path());
    assert_eq!(out.status.code(), Some(1), "stderr: {}", stderr_of(&out));
    let msg = stderr_of(&out);
    assert!(msg.contains("config error"), "unexpected stderr: {msg}");
    assert!(msg.contains("extra"), "should name the offending field: {msg}");
}

#[test]
fn invalid_config_value_exits_1_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.toml");
    let text = std::fs::read_to_string(smoke_config())
        .unwrap()
        .replace("separation = 1.6", "separation = -2.0");
    std::fs::write(&cfg_path, text).unwrap();
    let out = run_stage("make-data", &cfg_path, dir.path());
    assert_eq!(out.status.code(), Some(1), "stderr: {}", stderr_of(&out));
    let msg = stderr_of(&out);
    assert!(msg.contains("config error"), "unexpected stderr: {msg}");
    assert!(msg.contains("data.separation"), "should name the field: {msg}");
}

#[test]
fn nonexistent_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_stage("make-data", &dir.path().join("absent.toml"), dir.path());
    assert_eq!(out.status.code(), Some(1), "stderr: {}", stderr_of(&out));
}

#[test]
fn stale_lock_rejects_concurrent_invocation() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(".ltlab.lock"), "pid 0\n").unwrap();
    let out = run_stage("make-data", &smoke_config(), dir.path());
    assert_eq!(out.status.code(), Some(1), "stderr: {}", stderr_of(&out));
    let msg = stderr_of(&out);
    assert!(msg.contains(".ltlab.lock"), "should name the lock file: {msg}");
}

#[test]
fn help_covers_every_stage_and_flag() {
    let top = ltlab(&["--help"]);
    assert!(top.status.success());
    let text = String::from_utf8_lossy(&top.stdout).into_owned();
    let stages = [
        "make-data",
        "train-teacher",
        "distill",
        "relabel",
        "calibrate",
        "eval",
        "perturb",
        "bound-check",
        "report",
    ];
    for stage in stages {
        assert!(text.contains(stage), "top-level help omits {stage}:\n{text}");
    }
    for stage in stages {
        let out = ltlab(&[stage, "--help"]);
        assert!(out.status.success(), "{stage} --help failed");
        let sub = String::from_utf8_lossy(&out.stdout).into_owned();
        assert!(sub.contains("--config"), "{stage} help omits --config:\n{sub}");
        assert!(sub.contains("--out"), "{stage} help omits --out:\n{sub}");
    }
}

#[test]
fn bound_check_reports_form_agreement() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_stage("bound-check", &smoke_config(), dir.path());
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        text.contains("max form-equivalence deviation"),
        "bound-check should report the deviation:\n{text}"
    );
    assert!(dir.path().join("bound.csv").exists());
}
