use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tirlab_cli::{ExperimentConfig, RunManifest, RunStatus};

const TINY: &str = r#"
master_seed = 3
output_dir = "run"
cache_dir = "cache"

[generator]
d_in = 16
tokens = 8
source_classes = 4
target_classes = 3
n_disc = 2
n_dom = 2
max_proto_cos = 0.6

[encoder]
d_in = 16
tokens = 8
width = 16
text_dim = 8
blocks = 2
heads = 2
cls_isolated_blocks = 1

[pretrain]
steps = 4
batch_size = 8
eval_per_class = 2

[tir]
insertion_layers = [0]

[adapt]
epochs = 2

[trials]
n_way = 2
k_shot = 1
m_query = 2
count = 2
modes = ["off"]

[analysis]
taps = [0, 1]
images = 4
snapshot_every = 1
top_n = 2
"#;

fn tirlab(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tirlab")).args(args).env("TIRLAB_OUTPUT_ROOT", root).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("exp.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn run_ok_at(root: &Path, dir: &str, args: &[&str]) -> RunManifest {
    let out = tirlab(root, args);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    RunManifest::load(&root.join(dir)).unwrap()
}

fn run_ok(root: &Path, args: &[&str]) -> RunManifest {
    run_ok_at(root, "run", args)
}

#[test]
fn export_config_round_trips() {
    let root = tempfile::tempdir().unwrap();
    let out = tirlab(root.path(), &["export-config", "--defaults"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(ExperimentConfig::parse(&text, &[]).unwrap(), ExperimentConfig::default());
}

#[test]
fn minimal_run_then_cached_rerun() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), TINY);
    let cfg = cfg.to_str().unwrap();
    let m = run_ok(root.path(), &["run", cfg, "--quiet"]);
    assert_eq!(m.status, RunStatus::Ok);
    assert_eq!(m.metrics.len(), 1);
    assert_eq!(m.metrics[0].per_trial.len(), 2);
    assert!(!m.pretrain.as_ref().unwrap().cache_hit);
    for rel in m.artifacts.values() {
        assert!(root.path().join("run").join(rel).exists(), "{}", rel.display());
    }
    for name in
        ["trials", "cka/zero_shot", "norm_profile/finetuned_off", "trajectory/off", "roles", "dump/zero_shot/target"]
    {
        assert!(m.artifacts.contains_key(name), "{name}");
    }
    let again = run_ok(root.path(), &["run", cfg, "--quiet"]);
    assert!(again.pretrain.as_ref().unwrap().cache_hit);
    assert_eq!(again.metrics, m.metrics);
    assert_eq!(again.analysis, m.analysis);

    // Comparing a run with itself gives zero deltas.
    let dir = root.path().join("run");
    let out = tirlab(root.path(), &["compare", dir.to_str().unwrap(), dir.to_str().unwrap()]);
    assert!(out.status.success());
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("+0.0000"), "{table}");

    // Dumps from the run load in the analyzer.
    let src = dir.join(&m.artifacts["dump/finetuned_off/source"]);
    let tgt = dir.join(&m.artifacts["dump/finetuned_off/target"]);
    let out = tirlab(
        root.path(),
        &["analyze", src.to_str().unwrap(), "--target", tgt.to_str().unwrap(), "--condition", "maskK"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("layer,sum_value,metric,value\n"));
    assert!(text.contains("condition,value\nmaskK,"));
}

#[test]
fn mismatched_seeds_refuse_comparison() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), TINY);
    let cfg = cfg.to_str().unwrap();
    let off = "analysis.enabled=false";
    run_ok_at(root.path(), "a", &["run", cfg, "--quiet", "--set", off, "--output", "a"]);
    let out = tirlab(root.path(), &["run", cfg, "--quiet", "--set", off, "--output", "b", "--seed", "4"]);
    assert!(out.status.success());
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    let out = tirlab(root.path(), &["compare", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("master_seed"));
}

#[test]
fn malformed_config_exits_2_without_touching_output() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), &TINY.replace("n_way = 2", "n_way = 9"));
    let out = tirlab(root.path(), &["run", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("trials.n_way"));
    assert!(!root.path().join("run").exists());
    let out =
        tirlab(root.path(), &["run", cfg.to_str().unwrap(), "--set", "trials.n_way=2", "--set", "tir.mode=sideways"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!root.path().join("run").exists());
}

#[test]
fn stage_failure_exits_1_with_failed_manifest() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), TINY);
    // A file where the cache directory should be makes the pretrain stage fail.
    std::fs::write(root.path().join("cache"), b"not a directory").unwrap();
    let out = tirlab(root.path(), &["run", cfg.to_str().unwrap(), "--quiet"]);
    assert_eq!(out.status.code(), Some(1));
    let m = RunManifest::load(&root.path().join("run")).unwrap();
    assert_eq!(m.status, RunStatus::Failed);
    assert_eq!(m.failed_stage.as_deref(), Some("pretrain"));
    assert!(m.metrics.is_empty());
    assert!(root.path().join("run/run.log").exists());
}

#[test]
fn analyze_golden_dump() {
    let golden = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/golden_tiny.tirdump");
    let root = tempfile::tempdir().unwrap();
    let out = tirlab(root.path(), &["analyze", golden.to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 4 * 2);
    let out = tirlab(root.path(), &["analyze", golden.to_str().unwrap(), "--condition", "maskK"]);
    assert_eq!(out.status.code(), Some(2));
    let out = tirlab(root.path(), &["analyze", root.path().join("missing").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}
