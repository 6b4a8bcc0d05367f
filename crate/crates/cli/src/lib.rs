//! Argument parsing and dispatch for the `fdx` binary.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, ValueEnum};
use fdx_core::budget::{budget_table, residual_analog_power, BudgetReport};
use fdx_core::channel::Profile;
use fdx_core::grid::{build_frame, data_capacity, ofdm_demodulate, ofdm_modulate, DuplexMode, NodeRole};
use fdx_core::link::{Csi, Link, Timing, TrialOptions};
use fdx_core::measure::{
    budget_comments, data_path, run_required_lq_experiment, run_sic_experiment, run_sync_experiment,
    run_throughput_experiment, summarize, summary_table, trial_seed, write_csv, Experiment, ExperimentConfig,
};
use fdx_core::sync::{nsp_switch, zc_generate, NspReport, SyncCase};
use fdx_core::{Error, SystemParams};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Sync,
    Sic,
    RequiredLq,
    Throughput,
    Budget,
    Selftest,
}

impl Command {
    fn experiment(self) -> Option<Experiment> {
        match self {
            Command::Sync => Some(Experiment::Sync),
            Command::Sic => Some(Experiment::Sic),
            Command::RequiredLq => Some(Experiment::RequiredLq),
            Command::Throughput => Some(Experiment::Throughput),
            Command::Budget | Command::Selftest => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Parser)]
#[command(name = "fdx", about = "Full-duplex MIMO OFDM link simulator")]
pub struct RunSpec {
    /// TOML file with parameter and experiment keys.
    #[arg(long = "config")]
    pub config_path: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub experiment: Command,
    #[arg(long = "seed", default_value_t = 1)]
    pub master_seed: u64,
    #[arg(long = "out", default_value = "out")]
    pub out_dir: PathBuf,
    /// key=value, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    pub overrides: Vec<(String, String)>,
}

fn parse_override(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(format!("expected key=value, got {s:?}")),
    }
}

pub fn parse_args<I, T>(args: I) -> Result<RunSpec, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    RunSpec::try_parse_from(args)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        e if e.is_io() => EXIT_IO,
        Error::Param(_) | Error::Config(_) | Error::UnknownKey(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

/// Parameters and experiment settings after the config file and overrides.
pub fn resolve(spec: &RunSpec) -> fdx_core::Result<(SystemParams, ExperimentConfig)> {
    let mut cfg = ExperimentConfig::defaults(spec.experiment.experiment().unwrap_or(Experiment::Sic));
    let mut params = match &spec.config_path {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            SystemParams::from_config_str(&text, |k, v| cfg.set(k, v))?
        }
        None => SystemParams::default(),
    };
    for (k, v) in &spec.overrides {
        match params.set(k, v) {
            Err(Error::UnknownKey(_)) => cfg.set(k, v)?,
            other => other?,
        }
    }
    params.validate()?;
    cfg.validate()?;
    Ok((params, cfg))
}

fn stamp() -> String {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    secs.to_string()
}

/// Runs one spec and returns the process exit code.
pub fn run(spec: &RunSpec) -> i32 {
    match execute(spec) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("fdx: {e}");
            exit_code(&e)
        }
    }
}

fn execute(spec: &RunSpec) -> fdx_core::Result<i32> {
    let (params, cfg) = resolve(spec)?;
    if spec.experiment == Command::Selftest {
        let (passed, failed) = selftest();
        println!("selftest: {passed} passed, {failed} failed");
        return Ok(if failed == 0 { EXIT_OK } else { EXIT_FAILURE });
    }
    std::fs::create_dir_all(&spec.out_dir)?;
    let stamp = stamp();
    let seed = spec.master_seed;
    let comments = budget_comments(&params, &cfg.p_t_list);
    let Some(experiment) = spec.experiment.experiment() else {
        let reports: Vec<BudgetReport> = cfg.p_t_list.iter().map(|&p| BudgetReport::new(&params, p, None)).collect();
        write_csv(&spec.out_dir.join("budget_summary.csv"), &[], &reports)?;
        print!("{}", budget_table(&reports));
        return Ok(EXIT_OK);
    };
    let data = data_path(&spec.out_dir, experiment, &stamp);
    let summary = summary_path(&spec.out_dir, experiment);
    match experiment {
        Experiment::Sync | Experiment::Throughput => {
            let records = if experiment == Experiment::Sync {
                run_sync_experiment(&params, &cfg, seed)?
            } else {
                run_throughput_experiment(&params, &cfg, seed)?
            };
            let rows = summarize(&records, experiment == Experiment::Sync);
            write_csv(&data, &[], &records)?;
            write_csv(&summary, &comments, &rows)?;
            print!("{}", summary_table(&rows));
        }
        Experiment::Sic => {
            let run = run_sic_experiment(&params, &cfg, seed)?;
            let rows = summarize(&run.records, false);
            write_csv(&data, &[], &run.records)?;
            write_csv(&summary, &comments, &rows)?;
            write_csv(&spec.out_dir.join(format!("{experiment}_{stamp}_cdf.csv")), &[], &run.cdf)?;
            print!("{}", summary_table(&rows));
        }
        Experiment::RequiredLq => {
            let rows = run_required_lq_experiment(&params, &cfg, seed)?;
            write_csv(&data, &[], &rows)?;
            write_csv(&summary, &comments, &rows)?;
            print_required(&rows);
        }
    }
    Ok(EXIT_OK)
}

fn print_required(rows: &[fdx_core::measure::RequiredLqRow]) {
    println!("{:<8} {:>6} {:>10} {:>10}", "mode", "P_T", "target", "LQ[dB]");
    for r in rows {
        let lq = match (r.required_lq_db, r.saturated) {
            (Some(v), _) => format!("{v:.1}"),
            (None, true) => "saturated".to_string(),
            (None, false) => "-".to_string(),
        };
        println!("{:<8} {:>6.1} {:>10} {:>10}", r.duplex_mode, r.p_t_dbm, r.target, lq);
    }
}

/// Invariant checks on small instances; returns (passed, failed).
pub fn selftest() -> (usize, usize) {
    let checks: [(&str, fn() -> bool); 7] = [
        ("ofdm round trip", check_round_trip),
        ("zadoff-chu unit modulus", check_zc),
        ("nsp switch cases", check_switch),
        ("isolation arithmetic", check_isolation),
        ("genie cancellation", check_genie_cancellation),
        ("throughput cap", check_throughput_cap),
        ("seed derivation", check_seeds),
    ];
    let mut passed = 0;
    for (name, check) in checks {
        let ok = check();
        println!("  {:<26} {}", name, if ok { "ok" } else { "FAILED" });
        passed += ok as usize;
    }
    (passed, checks.len() - passed)
}

fn check_round_trip() -> bool {
    let p = DuplexMode::FdMimo.params(&SystemParams::default());
    let cap = data_capacity(&p, DuplexMode::FdMimo);
    let payload: Vec<Vec<u8>> = (0..2).map(|a| (0..cap).map(|i| ((i * 7 + a) % 3 == 0) as u8).collect()).collect();
    let Ok(grid) = build_frame(&p, &payload, DuplexMode::FdMimo, NodeRole::A) else { return false };
    let Ok(streams) = ofdm_modulate(&grid, &p) else { return false };
    let Ok(back) = ofdm_demodulate(&streams, 0, &p) else { return false };
    let err: f64 = back.data.iter().zip(&grid.cells.data).map(|(a, b)| (a - b).norm_sqr()).sum();
    (err / grid.cells.energy()).sqrt() <= 1e-10
}

fn check_zc() -> bool {
    [25, 29].iter().all(|&r| {
        zc_generate(r, 63).is_ok_and(|z| z.values.len() == 62 && z.values.iter().all(|v| (v.norm() - 1.0).abs() < 1e-12))
    })
}

fn check_switch() -> bool {
    let case = |a, b| nsp_switch(&NspReport::from_peaks(10, a, 20, b), 4.0);
    let both = case(5.0, 5.0);
    let d = case(5.0, 1.0);
    let s = case(1.0, 5.0);
    let f = case(1.0, 1.0);
    both.case_taken == SyncCase::BothPass
        && (both.tau_desired, both.tau_self) == (Some(10), Some(20))
        && (d.tau_desired, d.tau_self) == (Some(10), Some(10))
        && (s.tau_desired, s.tau_self) == (Some(20), Some(20))
        && (f.tau_desired, f.tau_self) == (None, None)
}

fn check_isolation() -> bool {
    (residual_analog_power(23.0, -43.0, -58.0).1 + 45.9).abs() <= 0.1
}

fn check_genie_cancellation() -> bool {
    let p = SystemParams { pa_enabled: false, lna_enabled: false, ..Default::default() };
    let Ok(link) = Link::new(&p, DuplexMode::FdMimo, 15.0) else { return false };
    let opts = TrialOptions { timing: Timing::Genie, csi: Csi::Genie, noise: false, both_directions: false };
    link.run_trial(20.0, Profile::ExponentialPdp, opts, 3)
        .is_ok_and(|o| o[0].delta_frame_db.is_some_and(|d| d <= -200.0) && o[0].ber == Some(0.0))
}

fn check_throughput_cap() -> bool {
    let Ok(link) = Link::new(&SystemParams::default(), DuplexMode::HdSiso, 7.0) else { return false };
    link.run_trial(30.0, Profile::Static, TrialOptions::default(), 5)
        .is_ok_and(|o| o.iter().all(|d| d.good_bits <= d.sent_bits && d.sent_bits == link.frame_bits()))
}

fn check_seeds() -> bool {
    let a = trial_seed(9, Experiment::Sync, 0, 0);
    a == trial_seed(9, Experiment::Sync, 0, 0) && a != trial_seed(9, Experiment::Sync, 0, 1)
}

/// `<dir>/<experiment>_summary.csv`.
pub fn summary_path(dir: &Path, experiment: Experiment) -> PathBuf {
    dir.join(format!("{experiment}_summary.csv"))
}
