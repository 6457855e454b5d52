mod common;

use std::fs;
use std::process::Command;

use common::{write_fixture, FIXTURE_SIZE};

fn lfra() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_lfra"));
    c.env("RUST_LOG", "warn");
    c
}

#[test]
fn complexity_prints_size_and_cost() {
    let dir = tempfile::tempdir().unwrap();
    let out = lfra().args(["complexity", "--out"]).arg(dir.path()).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("params = ") && text.contains("gflops = ") && text.contains("serialized_bytes = "));
    assert!(dir.path().join("manifest.txt").is_file());
}

#[test]
fn missing_dataset_root_fails_without_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = lfra()
        .args(["train", "--dataset-root"])
        .arg(dir.path().join("absent"))
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
    assert!(!dir.path().join("run/ckpt").exists());
}

#[test]
fn config_file_wins_over_flags() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    write_fixture(&root, 2);
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "epochs = 1\npreset = \"tiny\"\n").unwrap();
    let run = dir.path().join("run");
    let out = lfra()
        .args(["train", "--epochs", "5", "--preset", "default", "--size", &FIXTURE_SIZE.to_string()])
        .arg("--dataset-root")
        .arg(&root)
        .arg("--out")
        .arg(&run)
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(run.join("logs/train.csv")).unwrap().lines().count(), 2);
    let frozen = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(frozen.contains("epochs = 1") && frozen.contains("preset = \"tiny\""));

    let ckpt = run.join("ckpt/weights.bin");
    let bytes = fs::read(&ckpt).unwrap();
    fs::write(&ckpt, &bytes[..bytes.len() / 2]).unwrap();
    let out = lfra()
        .args(["eval", "--size", &FIXTURE_SIZE.to_string()])
        .arg("--dataset-root")
        .arg(&root)
        .arg("--out")
        .arg(&run)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("corrupt checkpoint"));
}

#[test]
fn unknown_preset_is_rejected() {
    let out = lfra().args(["complexity", "--preset", "nope"]).output().unwrap();
    assert!(!out.status.success());
}
