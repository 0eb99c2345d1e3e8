//! Exit codes, config echo and idempotency of the `sbddm` binary.

use std::path::Path;
use std::process::{Command, Output};

fn sbddm(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sbddm"))
        .args(args)
        .env("SBDDM_OUT_ROOT", root)
        .output()
        .unwrap()
}

#[test]
fn usage_and_config_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(sbddm(&["bench"], tmp.path()).status.code(), Some(1));
    assert_eq!(sbddm(&["bench", "--benchmark", "B9"], tmp.path()).status.code(), Some(1));
    assert_eq!(sbddm(&["gen", "--benchmark", "B1", "--tau", "500"], tmp.path()).status.code(), Some(1));
    assert_eq!(sbddm(&["--help"], tmp.path()).status.code(), Some(0));
}

#[test]
fn missing_checkpoint_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.sbdt");
    let out = sbddm(&["score", "--benchmark", "B1", "--checkpoint", missing.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.sbdt"));
}

#[test]
fn failed_gate_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let out = sbddm(&["bench", "--benchmark", "B1", "--epochs", "1", "--gate"], tmp.path());
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("FAIL"));
    let dir = tmp.path().join("bench-B1-seed7");
    assert!(dir.join("report.json").exists());
    assert!(std::fs::read_to_string(dir.join("train_log.txt")).unwrap().starts_with("epochs_trained=1\n"));
}

#[test]
fn gen_is_idempotent_and_echoes_config_first() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = sbddm(&["gen", "--benchmark", "B3", "--seed", "3", "--out", dir.to_str().unwrap()], tmp.path());
        assert!(out.status.success());
    }
    for f in ["config.txt", "train.csv", "val_id.csv", "test_id.csv", "test_ood.csv", "split.txt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let echo = a.join("config.txt");
    let reparsed = sbddm(&["gen", "--config", echo.to_str().unwrap(), "--out", tmp.path().join("c").to_str().unwrap()], tmp.path());
    assert!(reparsed.status.success());
    assert_eq!(std::fs::read(a.join("train.csv")).unwrap(), std::fs::read(tmp.path().join("c/train.csv")).unwrap());
    let ood = std::fs::read_to_string(a.join("test_ood.csv")).unwrap();
    assert!(ood.lines().next().unwrap().ends_with(",label,source"));
}
