//! Drives the `geco` binary on a micro synthetic configuration.

use std::path::Path;
use std::process::{Command, Output};

use geco_asd::pipeline::RunConfig;

const MICRO: &str = r#"
seed = 3

[data.synth]
n_classes = 2
clips_per_class = 6
test_clips_per_class = 4
clip_seconds = 2.5
ids_per_type = 2

[pae.arch]
enc_width = 16
enc_blocks = 1
dec_width = 16
dec_blocks = 1
bottleneck = 8

[pae.train]
epochs = 2
batch_size = 64

[pae.train.lr]
boundaries = [1]
values = [0.001, 0.0001]

[geco.arch]
stem_channels = 4
stages = [1]
channels = [4]
embed_dim = 8

[geco.train]
epochs = 4
batch_size = 4

[geco.train.lr]
boundaries = [2, 3]
values = [0.1, 0.01, 0.001]

[geco.train.lambda]
kind = "ramp"
warmup_end = 1
ramp_end = 3
total = 4
lambda_max = 10.0
"#;

fn geco(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geco"))
        .args(["--config", dir.join("micro.toml").to_str().unwrap()])
        .args(["--out", dir.join("out").to_str().unwrap()])
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn micro_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("micro.toml"), MICRO).unwrap();
    dir
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn evaluate_before_score_names_the_missing_stage() {
    let dir = micro_dir();
    let out = geco(dir.path(), &["evaluate"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("requires stage `score`"), "{}", stderr(&out));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = micro_dir();
    std::fs::write(dir.path().join("micro.toml"), "[geco.train]\nlamda = 3\n").unwrap();
    let out = geco(dir.path(), &["synth-data"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("lamda"), "{}", stderr(&out));
}

#[test]
fn printed_configs_parse_back() {
    let dir = micro_dir();
    for args in [&["show-config"][..], &["show-config", "--tiny"][..]] {
        let out = geco(dir.path(), args);
        assert!(out.status.success(), "{}", stderr(&out));
        RunConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    }
}

#[test]
fn shipped_configs_are_valid() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(configs).unwrap() {
        let path = entry.unwrap().path();
        RunConfig::from_file(&path).unwrap().validate().unwrap();
        seen += 1;
    }
    assert!(seen >= 3);
}

#[test]
fn changed_config_is_refused_downstream() {
    let dir = micro_dir();
    assert!(geco(dir.path(), &["synth-data"]).status.success());
    let out = geco(dir.path(), &["--seed", "4", "extract-features"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("hash"), "{}", stderr(&out));
}

#[test]
fn full_run_writes_every_artifact_and_reruns_identically() {
    let dir = micro_dir();
    let out = geco(dir.path(), &["all"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let root = dir.path().join("out");
    for rel in [
        "config.toml",
        "manifest.csv",
        "logs/geco.csv",
        "logs/pae_SynthA.csv",
        "models/SynthA/pae.safetensors",
        "models/geco.safetensors",
        "models/centers.json",
        "scores/scored_clips.csv",
        "scores/anomaly_score_SynthA_id_00.csv",
        "scores/anomaly_score_SynthA_id_01.csv",
        "results/metrics.csv",
        "results/metrics.json",
        "plots/roc_SynthA.svg",
        "plots/loss_pae.svg",
        "plots/loss_geco.svg",
    ] {
        assert!(root.join(rel).is_file(), "missing {rel}");
    }
    let scores = std::fs::read_to_string(root.join("scores/anomaly_score_SynthA_id_00.csv")).unwrap();
    let mut lines = scores.lines();
    assert_eq!(lines.next(), Some("filename,anomaly_score"));
    assert_eq!(lines.count(), 4);
    let metrics = std::fs::read_to_string(root.join("results/metrics.csv")).unwrap();
    assert!(metrics.starts_with("machine_type,machine_id,auc,pauc,config_hash"));
    assert!(metrics.lines().any(|l| l.starts_with("Average,")));

    let grid = geco(dir.path(), &["grid-gamma"]);
    assert!(grid.status.success(), "{}", stderr(&grid));
    let gamma = std::fs::read_to_string(root.join("results/gamma_search.csv")).unwrap();
    assert!(gamma.starts_with("machine_type,gamma,auc,pauc"));

    // Rerunning a completed stage reproduces its outputs byte for byte.
    let before = std::fs::read(root.join("scores/scored_clips.csv")).unwrap();
    let metrics_before = std::fs::read(root.join("results/metrics.csv")).unwrap();
    for stage in ["score", "evaluate"] {
        let o = geco(dir.path(), &[stage]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(before, std::fs::read(root.join("scores/scored_clips.csv")).unwrap());
    assert_eq!(metrics_before, std::fs::read(root.join("results/metrics.csv")).unwrap());
}

#[test]
fn same_type_center_mode_scores_every_clip() {
    let dir = micro_dir();
    std::fs::write(dir.path().join("micro.toml"), format!("centers = \"max_same_type\"\n{MICRO}")).unwrap();
    let out = geco(dir.path(), &["all"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let scored = std::fs::read_to_string(dir.path().join("out/scores/scored_clips.csv")).unwrap();
    assert_eq!(scored.lines().count(), 1 + 8);
}
