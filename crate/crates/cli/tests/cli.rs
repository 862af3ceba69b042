mod common;

use artlab::manifest::verify_chain;
use common::{artlab, ok, run_pipeline, s};

#[test]
fn unknown_flag_is_usage_error() {
    assert_eq!(artlab(&["generate", "--frobnicate"]).status.code(), Some(2));
    assert_eq!(artlab(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn missing_adapter_is_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("base.safetensors");
    std::fs::write(&base, b"x").unwrap();
    let out = dir.path().join("out");
    let o = artlab(&["generate", "--base", s(&base), "--prompt", "a red ball", "--out-dir", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("adapter"));
    assert!(!out.exists());
}

#[test]
fn dry_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    ok(&["synth", "--records", "10", "--art", "2", "--dry-run", "--out-dir", s(&out)]);
    ok(&["synth", "--kind", "exemplars", "--dry-run", "--out-dir", s(&out)]);
    assert!(!out.exists());
    // validation still happens
    assert_eq!(
        artlab(&["synth", "--records", "2", "--art", "5", "--dry-run", "--out-dir", s(&out)]).status.code(),
        Some(3)
    );
}

#[test]
fn unknown_config_key_is_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[train_scorer]\nsteps = 3\nlearning_rate = 1.0\n").unwrap();
    let o = artlab(&["train-scorer", "--config", s(&cfg), "--dry-run"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn smoke_pipeline_writes_chained_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let chain = run_pipeline(dir.path());
    verify_chain(&chain).unwrap();
    // everything after the two generators consumes an earlier output
    assert!(chain.iter().skip(2).all(|m| !m.inputs.is_empty()));
}
