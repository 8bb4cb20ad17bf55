use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[scene]
image_size = [64, 64]

[dataset]
source_train = 6
target_train = 6
target_val = 3

[pretrain]
corpus = 8
held_out = 2
patches_per_scene = 2
epochs = 1

[train]
crop = [32, 32]
batch_total = 4
batch_source = 2
iterations = 4
val_every = 0
checkpoint_every = 2
"#;

fn road(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_road")).args(args).env_remove("ROAD_RUN_DIR").output().unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p.to_string_lossy().into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn bad_flags_exit_with_usage_code() {
    assert_eq!(road(&["train", "--bogus"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let out = road(&["train", "--dataset", &s(dir.path()), "--grid", "3×3"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_output_parent_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = road(&["generate", "--config", &cfg, "--out", &s(&dir.path().join("no/such/place"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn generate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let manifest = |name: &str| {
        let out = road(&["generate", "--config", &cfg, "--out", &s(&dir.path().join(name))]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let path = String::from_utf8(out.stdout).unwrap();
        fs::read(path.trim()).unwrap()
    };
    assert_eq!(manifest("a"), manifest("b"));
}

#[test]
fn nonadapt_training_logs_zero_adaptation_terms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    assert!(road(&["generate", "--config", &cfg, "--out", &s(&data)]).status.success());

    let run = dir.path().join("run");
    let out = road(&["train", "--config", &cfg, "--dataset", &s(&data), "--variant", "nonadapt", "--out", &s(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["metrics.csv", "checkpoint.road", "eval.json", "teacher.road", "config.toml"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |n: &str| header.iter().position(|h| *h == n).unwrap();
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_owned).collect()).collect();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert_eq!(r[col("dist")].parse::<f64>().unwrap(), 0.0);
        assert_eq!(r[col("spt")].parse::<f64>().unwrap(), 0.0);
    }

    let ev = road(&["eval", "--config", &cfg, "--dataset", &s(&data), "--checkpoint", &s(&run.join("checkpoint.road")), "--out", &s(&dir.path().join("ev"))]);
    assert!(ev.status.success(), "{}", String::from_utf8_lossy(&ev.stderr));
}

#[test]
fn corrupt_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    assert!(road(&["generate", "--config", &cfg, "--out", &s(&data)]).status.success());
    let bad = dir.path().join("bad.road");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let out = road(&["eval", "--config", &cfg, "--dataset", &s(&data), "--checkpoint", &s(&bad), "--out", &s(&dir.path().join("ev"))]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}
