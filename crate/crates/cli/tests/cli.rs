//! The `fedsplit` binary's verbs, flags and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fedsplit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedsplit")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

const TINY: &str = "dataset.samples = 400
federation.rounds = 3
federation.clients = 4
federation.sample_ratio = 0.5
federation.local_steps = 2
federation.batch_size = 16
federation.client_lr = 3e-3
federation.server_lr = 1e-2
pretrain.epochs = 1
";

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("exp.cfg");
    fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path.display().to_string()
}

#[test]
fn check_passes() {
    let out = fedsplit(&["check"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(String::from_utf8_lossy(&out.stdout).matches("PASS").count(), 6);
}

#[test]
fn run_honours_seed_and_out() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out_dir = dir.path().join("results");
    let out = fedsplit(&["run", &cfg, "--seed", "9", "--out", out_dir.to_str().unwrap(), "--quiet"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stderr.is_empty());
    let metrics = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(metrics.lines().next().unwrap().ends_with("seed=9"));
    assert_eq!(metrics.lines().count(), 2 + 3);
    assert!(fs::read_to_string(out_dir.join("config.txt")).unwrap().contains("seed = 9"));
}

#[test]
fn sweep_and_probe() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out_dir = dir.path().join("sw");
    let out = fedsplit(&["sweep", &cfg, "--axis", "K", "--values", "1,2", "--out", out_dir.to_str().unwrap(), "--quiet"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("K=1").join("metrics.csv").exists());
    assert!(out_dir.join("K=2").join("metrics.csv").exists());

    let probe_dir = dir.path().join("pr");
    let out = fedsplit(&["probe", &cfg, "--out", probe_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("sigma_g2"));
    assert!(probe_dir.join("probes.csv").exists());
    assert!(!probe_dir.join("metrics.csv").exists());
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad_key = write_config(dir.path(), "federation.speed = 3\n");
    let out = fedsplit(&["run", &bad_key]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("valid keys"));

    let zero_q = write_config(dir.path(), "federation.sample_ratio = 0\n");
    assert_eq!(code(&fedsplit(&["run", &zero_q])), 1);
    assert_eq!(code(&fedsplit(&["run", "/no/such/file.cfg"])), 1);
    assert_eq!(code(&fedsplit(&["sweep", &write_config(dir.path(), ""), "--axis", "lr", "--values", "1"])), 1);
    assert_eq!(code(&fedsplit(&["run"])), 1);
    assert_eq!(code(&fedsplit(&["launch"])), 1);
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = fedsplit(&["run", &cfg, "--out", blocker.join("sub").to_str().unwrap(), "--quiet"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn help_exits_zero() {
    assert_eq!(code(&fedsplit(&["--help"])), 0);
}
