use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn toy_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.json")
}

fn hdvnet(args: &[&str], data: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdvnet"))
        .args(args)
        .arg("--config")
        .arg(toy_config())
        .arg("--data-dir")
        .arg(data)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout {}\nstderr {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn sha(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

#[test]
fn full_pipeline_on_the_toy_config() {
    let dir = tempfile::tempdir().unwrap();
    let (data, out) = (dir.path().join("data"), dir.path().join("out"));
    for cmd in ["gen-scene", "calibrate", "subsample", "train", "finetune", "infer", "eval", "report"] {
        ok(&hdvnet(&[cmd], &data, &out));
    }
    for f in ["thresholds.json", "backbone.ckpt", "final.ckpt", "toy_2.labels", "toy_2.pred.ply", "metrics.csv", "report.md"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let labels = std::fs::read_to_string(out.join("toy_2.labels")).unwrap();
    let n = labels.lines().count();
    assert!(n > 0 && labels.lines().all(|l| l.parse::<usize>().unwrap() < 3));
    let stamp: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics.csv.stamp.json")).unwrap()).unwrap();
    assert_eq!(stamp["seed"], 0);
    assert_eq!(stamp["config_hash"].as_str().unwrap().len(), 64);
    assert!(std::fs::read_dir(&out).unwrap().all(|e| !e.unwrap().file_name().to_string_lossy().ends_with(".partial")));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("metric,All,I5,I4,I3,I2,I1,I0"));
}

#[test]
fn eval_without_predictions_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let (data, out) = (dir.path().join("data"), dir.path().join("out"));
    ok(&hdvnet(&["gen-scene"], &data, &out));
    ok(&hdvnet(&["calibrate"], &data, &out));
    let o = hdvnet(&["eval"], &data, &out);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("predictions") && err.contains("toy_2.labels"), "{err}");
}

#[test]
fn training_twice_with_one_seed_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let prep = dir.path().join("prep");
    ok(&hdvnet(&["gen-scene"], &data, &prep));
    ok(&hdvnet(&["calibrate"], &data, &prep));
    let mut hashes = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        std::fs::create_dir_all(&out).unwrap();
        std::fs::copy(prep.join("thresholds.json"), out.join("thresholds.json")).unwrap();
        ok(&hdvnet(&["train", "--seed", "7"], &data, &out));
        hashes.push(sha(&out.join("backbone.ckpt")));
    }
    assert_eq!(hashes[0], hashes[1]);
    let out = dir.path().join("c");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::copy(prep.join("thresholds.json"), out.join("thresholds.json")).unwrap();
    ok(&hdvnet(&["train", "--seed", "8"], &data, &out));
    assert_ne!(sha(&out.join("backbone.ckpt")), hashes[0]);
}

#[test]
fn bad_usage_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_hdvnet")).arg("no-such-command").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = hdvnet(&["finetune"], &dir.path().join("d"), &dir.path().join("o"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("backbone checkpoint"));
}

#[test]
fn library_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let (data, out) = (dir.path().join("data"), dir.path().join("out"));
    ok(&hdvnet(&["gen-scene"], &data, &out));
    std::fs::write(data.join("toy_0.ply"), b"not a ply file").unwrap();
    let o = hdvnet(&["calibrate"], &data, &out);
    assert_eq!(o.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(o.stderr.trim_ascii()).unwrap();
    assert_eq!(err["error"]["kind"], "runtime");
    assert!(!out.join("thresholds.json").exists());
}
