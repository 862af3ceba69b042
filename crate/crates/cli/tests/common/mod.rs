//! Helpers shared by the CLI test targets.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use artlab::manifest::RunManifest;

pub fn artlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_artlab"))
        .args(args)
        .env_remove("ARTLAB_CACHE")
        .output()
        .unwrap()
}

pub fn ok(args: &[&str]) -> Output {
    let o = artlab(args);
    assert!(
        o.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMOKE_CONFIG: &str = r#"
[train_scorer]
steps = 5
pretraining_pairs = 64
batch_size = 32

[train_codec]
held_out_fraction = 0.2
[train_codec.train]
steps = 4
batch_size = 8

[train_base]
[train_base.train]
steps = 4
batch_size = 8
checkpoint_every = 0

[generate]
steps = 3

[stylize]
steps = 3

[evaluate]
max_reference = 12
[evaluate.benchmark]
seeds_per_prompt = 1
[evaluate.benchmark.sample]
steps = 2

[probe_inversion]
sample_steps = 2
samples = 2
[probe_inversion.probe]
steps = 2
batch_size = 2
"#;

pub const CHAIN: [(&str, &str); 11] = [
    ("corpus", "synth"),
    ("scorer", "train-scorer"),
    ("filter", "filter"),
    ("codec", "train-codec"),
    ("base", "train-base"),
    ("adapter", "train-adapter"),
    ("gen", "generate"),
    ("styl", "stylize"),
    ("eval", "evaluate"),
    ("attr", "attribute"),
    ("probe", "probe-inversion"),
];

/// Runs every subcommand once under `d` on a small fixture corpus and
/// returns the run manifests in execution order.
pub fn run_pipeline(d: &Path) -> Vec<RunManifest> {
    let cfg = d.join("smoke.toml");
    std::fs::write(&cfg, SMOKE_CONFIG).unwrap();
    let c = s(&cfg);
    let step = |name: &str| -> PathBuf { d.join(name) };

    ok(&["synth", "--config", c, "--records", "24", "--art", "6", "--out-dir", s(&step("corpus"))]);
    ok(&["synth", "--config", c, "--seed", "9", "--records", "20", "--art", "6", "--out-dir", s(&step("dev"))]);
    ok(&["synth", "--kind", "exemplars", "--count", "3", "--out-dir", s(&step("ex"))]);
    ok(&["train-scorer", "--config", c, "--out-dir", s(&step("scorer"))]);
    let scorer = step("scorer").join("scorer.safetensors");
    let o = ok(&[
        "filter",
        "--manifest",
        s(&step("corpus").join("manifest.jsonl")),
        "--scorer",
        s(&scorer),
        "--calibration-manifest",
        s(&step("dev").join("manifest.jsonl")),
        "--calibration-labels",
        s(&step("dev").join("labels.jsonl")),
        "--out-dir",
        s(&step("filter")),
    ]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("rejected by caption"));
    let filtered = step("filter").join("filtered.jsonl");
    ok(&["train-codec", "--config", c, "--manifest", s(&filtered), "--out-dir", s(&step("codec"))]);
    let codec = step("codec").join("codec.safetensors");
    ok(&[
        "train-base", "--config", c, "--manifest", s(&filtered), "--codec", s(&codec), "--out-dir", s(&step("base")),
    ]);
    let base = step("base").join("base.safetensors");
    let ex = step("ex").join("exemplars");
    ok(&[
        "train-adapter", "--base", s(&base), "--exemplars", s(&ex), "--steps", "2", "--batch", "2", "--out-dir",
        s(&step("adapter")),
    ]);
    run_inference(d, "");
    CHAIN
        .iter()
        .map(|(dir, cmd)| RunManifest::load(&step(dir).join(RunManifest::file_name(cmd))).unwrap())
        .collect()
}

/// The inference commands of the pipeline, writing to `<name><suffix>`
/// directories. Needs the training part of [`run_pipeline`] to have run.
pub fn run_inference(d: &Path, suffix: &str) {
    let c = d.join("smoke.toml");
    let c = s(&c);
    let step = |name: &str| -> PathBuf { d.join(name) };
    let out = |name: &str| -> PathBuf { d.join(format!("{name}{suffix}")) };
    let base = step("base").join("base.safetensors");
    let adapter = step("adapter").join("adapter.safetensors");
    let ex = step("ex").join("exemplars");
    let filtered = step("filter").join("filtered.jsonl");
    let scorer = step("scorer").join("scorer.safetensors");
    ok(&[
        "generate", "--config", c, "--base", s(&base), "--adapter", s(&adapter), "--prompt", "a red ball on the beach",
        "--t-start", "800", "--out-dir", s(&out("gen")),
    ]);
    let query = step("gen").join("gen_000.png");
    assert!(query.exists());
    ok(&[
        "stylize", "--config", c, "--base", s(&base), "--adapter", s(&adapter), "--image", s(&query), "--prompt",
        "a red ball on the beach", "--out-dir", s(&out("styl")),
    ]);
    let o = ok(&[
        "evaluate", "--config", c, "--base", s(&base), "--adapter", s(&adapter), "--exemplars", s(&ex), "--prompt",
        "a red ball on the beach", "--reference", s(&filtered), "--scorer", s(&scorer), "--out-dir", s(&out("eval")),
    ]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("adapter"));
    ok(&[
        "attribute", "--query", s(&query), "--manifest", s(&filtered), "--exemplars", s(&ex), "-k", "3", "--out-dir",
        s(&out("attr")),
    ]);
    let attr: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out("attr").join("attribution.json")).unwrap()).unwrap();
    assert_eq!(attr["items"].as_array().unwrap().len(), 3);
    ok(&[
        "probe-inversion", "--config", c, "--base", s(&base), "--exemplars", s(&ex), "--out-dir", s(&out("probe")),
    ]);
}

/// Inference steps of [`CHAIN`] as (directory, command).
pub const INFERENCE: [(&str, &str); 5] = [
    ("gen", "generate"),
    ("styl", "stylize"),
    ("eval", "evaluate"),
    ("attr", "attribute"),
    ("probe", "probe-inversion"),
];
