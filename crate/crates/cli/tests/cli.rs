use std::path::Path;
use std::process::{Command, Output};

use tjac::Manifest;

fn tjac(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tjac"))
        .args(args)
        .arg("--out")
        .arg(dir.join("out"))
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn manifest(dir: &Path, command: &str) -> Manifest {
    let text = std::fs::read_to_string(dir.join("out").join(command).join("manifest.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[training]\nepoch = 3\n");
    let out = tjac(dir.path(), &["train", "--scale", "tiny", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config error"));
}

#[test]
fn malformed_data_exits_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.csv");
    std::fs::write(&data, "1,2,3\n").unwrap();
    let cfg = write_config(dir.path(), &format!("[data]\npath = {:?}\n", data.to_string_lossy()));
    let out = tjac(dir.path(), &["train", "--scale", "tiny", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data error"));
}

#[test]
fn held_lock_refuses_to_start() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("out")).unwrap();
    std::fs::write(dir.path().join("out/.lock"), "1\n").unwrap();
    let out = tjac(dir.path(), &["train", "--scale", "tiny"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn oracle_check_passes_and_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = tjac(dir.path(), &["oracle-check"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(dir.path().join("out/oracle-check/oracle.csv")).unwrap();
    assert_eq!(table.lines().count(), 6);
    assert!(!dir.path().join("out/.lock").exists());
}

#[test]
fn second_svd_run_reuses_cached_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[training]\nepochs = 1\n");
    let args = ["svd", "--scale", "tiny", "--verify", "--config", &cfg];
    assert!(tjac(dir.path(), &args).status.success());
    let first = manifest(dir.path(), "svd");
    assert!(first.cache.iter().any(|e| e.artifact == "jacobian" && !e.reused));
    assert!(!first.reused("svd"));
    assert_eq!(first.config.training.epochs, 1);
    assert!(tjac(dir.path(), &args).status.success());
    let second = manifest(dir.path(), "svd");
    assert!(second.reused("jacobian") && second.reused("svd"));
    assert_eq!(first.config_hash, second.config_hash);
    assert_eq!(first.summary, second.summary);
}

#[test]
fn manifest_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 4\n[training]\nepochs = 2\n");
    assert!(tjac(dir.path(), &["train", "--scale", "tiny", "--config", &cfg]).status.success());
    let stored = dir.path().join("out/train/manifest.json");
    let again = tempfile::tempdir().unwrap();
    let out = tjac(again.path(), &["train", "--config", &stored.to_string_lossy()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let a = std::fs::read(dir.path().join("out/train/loss_curve.csv")).unwrap();
    let b = std::fs::read(again.path().join("out/train/loss_curve.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(manifest(dir.path(), "train").config_hash, manifest(again.path(), "train").config_hash);
}
