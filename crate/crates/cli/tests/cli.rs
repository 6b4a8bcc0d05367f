use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fdx_cli::{parse_args, resolve, Command as Cmd, EXIT_IO, EXIT_OK, EXIT_USAGE};

fn fdx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fdx")).args(args).output().unwrap()
}

fn files_with_prefix(dir: &Path, prefix: &str) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            let name = p.file_name().unwrap().to_string_lossy();
            name.starts_with(prefix) && !name.ends_with("_summary.csv")
        })
        .collect();
    out.sort();
    out
}

#[test]
fn overrides_reach_the_resolved_config() {
    let spec = parse_args(["fdx", "--experiment", "sync", "--set", "tx_power_dbm=7", "--set", "trials=3"]).unwrap();
    assert_eq!(spec.experiment, Cmd::Sync);
    assert_eq!(spec.master_seed, 1);
    assert_eq!(spec.overrides, vec![("tx_power_dbm".into(), "7".into()), ("trials".into(), "3".into())]);
    let (params, cfg) = resolve(&spec).unwrap();
    assert_eq!(params.tx_power_dbm, 7.0);
    assert_eq!(cfg.trials, 3);

    let unknown = parse_args(["fdx", "--experiment", "sync", "--set", "bogus=1"]).unwrap();
    assert!(resolve(&unknown).is_err());
    assert!(parse_args(["fdx", "--experiment", "sync", "--set", "novalue"]).is_err());
}

#[test]
fn unknown_experiment_is_a_usage_error() {
    let out = fdx(&["--experiment", "bogus"]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    let out = fdx(&["--experiment", "sync", "--set", "trials=0", "--out", "unused"]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
}

#[test]
fn budget_writes_its_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = fdx(&["--experiment", "budget", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("budget_summary.csv")).unwrap();
    assert!(csv.lines().count() >= 2);
    assert!(String::from_utf8_lossy(&out.stdout).contains("P_T[dBm]"));
}

#[test]
fn selftest_passes() {
    let out = fdx(&["--experiment", "selftest"]);
    assert_eq!(out.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("0 failed"));
}

#[test]
fn sync_run_writes_one_row_per_trial() {
    let dir = tempfile::tempdir().unwrap();
    let out = fdx(&["--experiment", "sync", "--set", "trials=5", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&out.stderr));
    let data = files_with_prefix(dir.path(), "sync_");
    assert_eq!(data.len(), 1);
    let text = fs::read_to_string(&data[0]).unwrap();
    let rows = text.lines().filter(|l| !l.starts_with('#')).count() - 1;
    assert_eq!(rows, 5 * 7);
    assert!(dir.path().join("sync_summary.csv").exists());
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = fdx(&["--experiment", "budget", "--out", blocker.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(EXIT_IO));
    let out = fdx(&["--experiment", "budget", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(EXIT_IO));
}

#[test]
fn same_spec_gives_identical_data() {
    let runs: Vec<String> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let args = ["--experiment", "sync", "--seed", "11", "--set", "trials=2", "--out", dir.path().to_str().unwrap()];
            assert_eq!(fdx(&args).status.code(), Some(EXIT_OK));
            let data = files_with_prefix(dir.path(), "sync_");
            fs::read_to_string(&data[0]).unwrap()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
}
