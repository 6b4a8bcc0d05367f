//! Noise and link-quality estimation, the experiment runners, and CSV output.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::budget::BudgetReport;
use crate::channel::Profile;
use crate::error::{Error, Result};
use crate::grid::{DuplexMode, SampleStream};
use crate::link::{sync_ok, ArrivalTruth, DirectionOutcome, Link, ReliabilityTrial, Timing, TrialOptions};
use crate::params::{lin_to_db, SystemParams};
use crate::sync::{NspReport, SyncStrategy};

/// Lowest reported link quality.
pub const LQ_FLOOR_DB: f64 = -40.0;

/// Mean per-antenna noise power over the first `half_frames` half-frames of
/// a capture taken with both transmitters silent.
pub fn noise_variance(streams: &[SampleStream], half_frames: usize, params: &SystemParams) -> Result<f64> {
    if half_frames == 0 {
        return Err(Error::Param("noise window needs at least one half-frame".into()));
    }
    if streams.is_empty() || streams.iter().any(|s| s.samples.is_empty()) {
        return Err(Error::Shape("empty noise capture".into()));
    }
    let window = half_frames * params.half_frame_len();
    let mut total = 0.0;
    for s in streams {
        if s.samples.len() < window {
            return Err(Error::Bounds { index: 0, needed: window, len: s.samples.len() });
        }
        total += s.samples[..window].iter().map(|x| x.norm_sqr()).sum::<f64>();
    }
    Ok(total / (window * streams.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinkQualityEstimate {
    pub lq_db: f64,
    pub noise_var: f64,
    /// Mean received power per antenna, noise included.
    pub signal_energy: f64,
}

/// Per-antenna SNR `(E|y|^2 - s2) / s2`, clamped at [`LQ_FLOOR_DB`].
pub fn link_quality(rx: &[SampleStream], noise_var: f64) -> Result<LinkQualityEstimate> {
    if !(noise_var > 0.0) {
        return Err(Error::Param(format!("noise variance must be positive, got {noise_var}")));
    }
    let count: usize = rx.iter().map(|s| s.samples.len()).sum();
    if count == 0 {
        return Err(Error::Shape("empty capture".into()));
    }
    let energy = rx.iter().flat_map(|s| &s.samples).map(|x| x.norm_sqr()).sum::<f64>() / count as f64;
    let lq = (energy - noise_var) / noise_var;
    let lq_db = if lq > 0.0 { lin_to_db(lq).max(LQ_FLOOR_DB) } else { LQ_FLOOR_DB };
    Ok(LinkQualityEstimate { lq_db, noise_var, signal_energy: energy })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Experiment {
    Sync,
    Sic,
    RequiredLq,
    Throughput,
}

impl Experiment {
    pub const ALL: [Experiment; 4] =
        [Experiment::Sync, Experiment::Sic, Experiment::RequiredLq, Experiment::Throughput];

    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::Sync => "sync",
            Experiment::Sic => "sic",
            Experiment::RequiredLq => "required-lq",
            Experiment::Throughput => "throughput",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Experiment::Sync => 0x5359_4e43,
            Experiment::Sic => 0x5349_4300,
            Experiment::RequiredLq => 0x5245_514c,
            Experiment::Throughput => 0x5448_5250,
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::Param(format!("unknown experiment {s:?}")))
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of one trial. Cells that share a `cell` value see the same channels
/// and payloads.
pub fn trial_seed(master: u64, experiment: Experiment, cell: u64, trial: u64) -> u64 {
    splitmix(splitmix(splitmix(master ^ experiment.tag()) ^ cell) ^ trial)
}

/// Thread pool sized by `FDX_THREADS` (unset or 0 lets rayon choose).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let n = match std::env::var("FDX_THREADS") {
        Ok(v) => v.trim().parse().map_err(|_| Error::Config(format!("FDX_THREADS={v:?} is not a count")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Runs `f(0..n)` on the pool and returns results in index order.
fn par_map<T: Send>(pool: &rayon::ThreadPool, n: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    pool.install(|| (0..n).into_par_iter().map(&f).collect())
}

/// How the required-LQ search estimates frame failure at one LQ point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reliability {
    /// Mean over trials of the failure probability given the pilot noise.
    Conditional,
    /// Counted frames, stopped once the Wilson interval clears the target.
    Sampled { max_frames: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub trials: usize,
    pub p_t_list: Vec<f64>,
    /// Sync experiment grid.
    pub lq_list: Vec<f64>,
    /// Range of the uniform LQ draw in the SIC and throughput experiments.
    pub lq_min: f64,
    pub lq_max: f64,
    pub modes: Vec<DuplexMode>,
    pub strategy: SyncStrategy,
    pub profile: Profile,
    pub targets: Vec<f64>,
    pub lq_floor: f64,
    pub lq_ceiling: f64,
    pub lq_step: f64,
    pub reliability: Reliability,
}

impl ExperimentConfig {
    pub fn defaults(experiment: Experiment) -> Self {
        let base = Self {
            trials: 200,
            p_t_list: vec![0.0, 7.0, 15.0, 20.0, 23.0],
            lq_list: (0..7).map(|i| 4.0 + 5.0 * i as f64).collect(),
            lq_min: 0.0,
            lq_max: 40.0,
            modes: vec![DuplexMode::FdMimo],
            strategy: SyncStrategy::Switching,
            profile: Profile::ExponentialPdp,
            targets: vec![0.99999, 0.999999],
            lq_floor: 0.0,
            lq_ceiling: 60.0,
            lq_step: 0.5,
            reliability: Reliability::Conditional,
        };
        match experiment {
            Experiment::Sync => Self { trials: 500, p_t_list: vec![7.0], ..base },
            Experiment::Sic => Self { trials: 500, ..base },
            Experiment::RequiredLq => Self {
                trials: 16,
                p_t_list: vec![0.0, 5.0, 10.0, 15.0, 20.0, 23.0],
                modes: DuplexMode::ALL.to_vec(),
                profile: Profile::Static,
                ..base
            },
            Experiment::Throughput => Self {
                p_t_list: vec![7.0, 15.0, 23.0],
                modes: DuplexMode::ALL.to_vec(),
                profile: Profile::Static,
                ..base
            },
        }
    }

    /// Sets one experiment key; dotted keys use the last segment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let name = key.rsplit('.').next().unwrap_or(key).trim();
        let value = value.trim().trim_matches('"');
        let bad = || Error::Config(format!("bad value {value:?} for {name}"));
        fn list<T: FromStr>(value: &str) -> Option<Vec<T>> {
            let v = value.trim_matches(|c| c == '[' || c == ']');
            v.split(',').filter(|s| !s.trim().is_empty()).map(|s| s.trim().trim_matches('"').parse().ok()).collect()
        }
        match name {
            "trials" => self.trials = value.parse().map_err(|_| bad())?,
            "p_t_list" => self.p_t_list = list(value).ok_or_else(bad)?,
            "lq_list" => self.lq_list = list(value).ok_or_else(bad)?,
            "lq_min" => self.lq_min = value.parse().map_err(|_| bad())?,
            "lq_max" => self.lq_max = value.parse().map_err(|_| bad())?,
            "modes" => self.modes = list(value).ok_or_else(bad)?,
            "strategy" => self.strategy = value.parse().map_err(|_| bad())?,
            "profile" => self.profile = value.parse().map_err(|_| bad())?,
            "targets" => self.targets = list(value).ok_or_else(bad)?,
            "lq_floor" => self.lq_floor = value.parse().map_err(|_| bad())?,
            "lq_ceiling" => self.lq_ceiling = value.parse().map_err(|_| bad())?,
            "lq_step" => self.lq_step = value.parse().map_err(|_| bad())?,
            "reliability" => {
                self.reliability = match value {
                    "conditional" => Reliability::Conditional,
                    "sampled" => Reliability::Sampled { max_frames: 100_000 },
                    _ => return Err(bad()),
                }
            }
            "max_frames" => {
                let n = value.parse().map_err(|_| bad())?;
                self.reliability = Reliability::Sampled { max_frames: n };
            }
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Param(m.to_string()));
        if self.trials == 0 {
            return fail("trials must be at least 1");
        }
        if self.p_t_list.is_empty() || self.modes.is_empty() {
            return fail("empty transmit-power or mode list");
        }
        if !(self.lq_min <= self.lq_max) {
            return fail("lq_min exceeds lq_max");
        }
        if !(self.lq_step > 0.0) || !(self.lq_floor < self.lq_ceiling) {
            return fail("LQ search needs a positive step and floor below ceiling");
        }
        if self.targets.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return fail("reliability targets must lie in (0, 1)");
        }
        Ok(())
    }
}

/// One trial of one experiment, as written to the data CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeasurementRecord {
    /// Trial index within its cell.
    pub trial_id: usize,
    pub duplex_mode: &'static str,
    pub p_t_dbm: f64,
    pub lq_db: f64,
    pub sync_case: &'static str,
    pub sync_ok: bool,
    pub delta_frame_db: Option<f64>,
    pub total_sic_db: Option<f64>,
    pub ber: Option<f64>,
    pub throughput_bps: Option<f64>,
    pub seed: u64,
}

/// Scan outcome of one sync trial, before any strategy is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncScan {
    pub trial_id: usize,
    pub p_t_dbm: f64,
    pub lq_db: f64,
    pub seed: u64,
    pub report: NspReport,
    pub truth: ArrivalTruth,
}

/// Scans every (P_T, LQ, trial) cell of the sync experiment once. The
/// correlation traces are dropped.
pub fn sync_scans(params: &SystemParams, cfg: &ExperimentConfig, master: u64) -> Result<Vec<SyncScan>> {
    cfg.validate()?;
    let pool = thread_pool()?;
    let mode = cfg.modes[0];
    let mut out = Vec::new();
    for (pi, &p_t) in cfg.p_t_list.iter().enumerate() {
        let link = Link::new(params, mode, p_t)?;
        for &lq in &cfg.lq_list {
            let scans = par_map(&pool, cfg.trials, |t| {
                let seed = trial_seed(master, Experiment::Sync, pi as u64, t as u64);
                let (r, truth) = link.sync_trial(lq, cfg.profile, seed)?;
                let report = NspReport::from_peaks(r.peak_idx_1, r.nsp_1, r.peak_idx_2, r.nsp_2);
                Ok(SyncScan { trial_id: t, p_t_dbm: p_t, lq_db: lq, seed, report, truth })
            })?;
            out.extend(scans);
        }
    }
    Ok(out)
}

/// Sync success of each stored scan under `strategy`.
pub fn sync_outcomes(params: &SystemParams, scans: &[SyncScan], strategy: SyncStrategy) -> Vec<bool> {
    scans.iter().map(|s| sync_ok(params, &strategy.decide(&s.report, params.nsp_threshold), s.truth)).collect()
}

fn trial_record(o: DirectionOutcome, trial_id: usize, mode: DuplexMode, p_t_dbm: f64, lq_db: f64, seed: u64) -> MeasurementRecord {
    let delta = o.sync_ok.then_some(o.delta_frame_db).flatten();
    let total = match (o.analog_db, delta) {
        (Some(a), Some(d)) => Some(-a - d),
        _ => None,
    };
    MeasurementRecord {
        trial_id,
        duplex_mode: mode.as_str(),
        p_t_dbm,
        lq_db,
        sync_case: o.decision.case_taken.as_str(),
        sync_ok: o.sync_ok,
        delta_frame_db: delta,
        total_sic_db: total,
        ber: o.sync_ok.then_some(o.ber).flatten(),
        throughput_bps: None,
        seed,
    }
}

/// Full frame reception at node A per (P_T, LQ, trial) with the configured
/// strategy; BER is recorded for the trials that synchronized.
pub fn run_sync_experiment(params: &SystemParams, cfg: &ExperimentConfig, master: u64) -> Result<Vec<MeasurementRecord>> {
    cfg.validate()?;
    let pool = thread_pool()?;
    let mode = cfg.modes[0];
    let opts = TrialOptions { timing: Timing::Estimated(cfg.strategy), both_directions: false, ..Default::default() };
    let mut out = Vec::new();
    for (pi, &p_t) in cfg.p_t_list.iter().enumerate() {
        let link = Link::new(params, mode, p_t)?;
        for &lq in &cfg.lq_list {
            let rows = par_map(&pool, cfg.trials, |t| {
                let seed = trial_seed(master, Experiment::Sync, pi as u64, t as u64);
                let o = link.run_trial(lq, cfg.profile, opts, seed)?.remove(0);
                Ok(trial_record(o, t, mode, p_t, lq, seed))
            })?;
            out.extend(rows);
        }
    }
    Ok(out)
}

/// Empirical CDF point of the total cancellation at one transmit power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CdfPoint {
    pub p_t_dbm: f64,
    pub total_sic_db: f64,
    pub cdf: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SicRun {
    pub records: Vec<MeasurementRecord>,
    pub cdf: Vec<CdfPoint>,
}

fn uniform_lq(cfg: &ExperimentConfig, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x4c51));
    if cfg.lq_max > cfg.lq_min {
        rng.gen_range(cfg.lq_min..cfg.lq_max)
    } else {
        cfg.lq_min
    }
}

/// Total cancellation (analog isolation plus digital level) at node A,
/// with LQ drawn uniformly per trial.
pub fn run_sic_experiment(params: &SystemParams, cfg: &ExperimentConfig, master: u64) -> Result<SicRun> {
    cfg.validate()?;
    let pool = thread_pool()?;
    let opts = TrialOptions { timing: Timing::Estimated(cfg.strategy), both_directions: false, ..Default::default() };
    let mut records = Vec::new();
    let mut cdf = Vec::new();
    for &mode in &cfg.modes {
        for (pi, &p_t) in cfg.p_t_list.iter().enumerate() {
            let link = Link::new(params, mode, p_t)?;
            let rows = par_map(&pool, cfg.trials, |t| {
                let seed = trial_seed(master, Experiment::Sic, pi as u64, t as u64);
                let lq = uniform_lq(cfg, seed);
                let o = link.run_trial(lq, cfg.profile, opts, seed)?.remove(0);
                Ok(trial_record(o, t, mode, p_t, lq, seed))
            })?;
            let mut totals: Vec<f64> = rows.iter().filter_map(|r| r.total_sic_db).collect();
            totals.sort_by(f64::total_cmp);
            let n = totals.len() as f64;
            cdf.extend(totals.iter().enumerate().map(|(i, &v)| CdfPoint {
                p_t_dbm: p_t,
                total_sic_db: v,
                cdf: (i + 1) as f64 / n,
            }));
            records.extend(rows);
        }
    }
    Ok(SicRun { records, cdf })
}

/// Minimal LQ meeting one reliability target for one mode and power.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RequiredLqRow {
    pub duplex_mode: &'static str,
    pub p_t_dbm: f64,
    pub target: f64,
    pub required_lq_db: Option<f64>,
    /// Target missed even at the ceiling.
    pub saturated: bool,
    pub failure_at_required: Option<f64>,
    /// Failure rate one grid step below the reported LQ.
    pub failure_below: Option<f64>,
    pub trials: usize,
}

/// Frame-failure estimate at one LQ point.
#[derive(Debug, Clone, Copy, PartialEq)]
struct FailureEstimate {
    rate: f64,
    /// Wilson bounds (sampled mode only).
    bounds: Option<(f64, f64)>,
}

impl FailureEstimate {
    fn meets(&self, target: f64) -> bool {
        let allowed = 1.0 - target;
        match self.bounds {
            Some((_, hi)) if hi <= allowed => true,
            Some((lo, _)) if lo > allowed => false,
            _ => self.rate <= allowed,
        }
    }
}

/// 95% Wilson score interval of `successes` out of `n`.
pub fn wilson_interval(successes: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054;
    let n_f = n as f64;
    let p = successes as f64 / n_f;
    let denom = 1.0 + z * z / n_f;
    let centre = (p + z * z / (2.0 * n_f)) / denom;
    let half = z * (p * (1.0 - p) / n_f + z * z / (4.0 * n_f * n_f)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// One-sided sign test: probability of at least `wins` successes out of
/// `wins + losses` fair coin flips. Ties are discarded by the caller.
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let mut log_c = 0.0;
    let mut tail = 0.0;
    for k in 0..=n {
        if k > 0 {
            log_c += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        if k >= wins {
            tail += (log_c - n as f64 * std::f64::consts::LN_2).exp();
        }
    }
    tail.min(1.0)
}

fn failure_at(
    pool: &rayon::ThreadPool,
    link: &Link,
    trials: &[ReliabilityTrial],
    lq: f64,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<FailureEstimate> {
    match cfg.reliability {
        Reliability::Conditional => {
            let q = par_map(pool, trials.len(), |t| link.frame_error_probability(&trials[t], lq, None))?;
            Ok(FailureEstimate { rate: q.iter().sum::<f64>() / q.len() as f64, bounds: None })
        }
        Reliability::Sampled { max_frames } => {
            let allowed = 1.0 - cfg.targets.iter().cloned().fold(0.0, f64::max);
            let batch = trials.len().max(1) * 8;
            let (mut frames, mut failures) = (0usize, 0usize);
            while frames < max_frames {
                let n = batch.min(max_frames - frames);
                let base = frames;
                let outcomes = par_map(pool, n, |i| {
                    let k = base + i;
                    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ k as u64));
                    link.frame_error_probability(&trials[k % trials.len()], lq, Some(&mut rng))
                })?;
                failures += outcomes.iter().filter(|&&f| f > 0.5).count();
                frames += n;
                let (lo, hi) = wilson_interval(failures, frames);
                if hi <= allowed || lo > allowed {
                    break;
                }
            }
            let rate = failures as f64 / frames as f64;
            Ok(FailureEstimate { rate, bounds: Some(wilson_interval(failures, frames)) })
        }
    }
}

/// Bisection over the LQ grid per mode, power and target. Trials share
/// channels across LQ points, powers and modes.
pub fn run_required_lq_experiment(params: &SystemParams, cfg: &ExperimentConfig, master: u64) -> Result<Vec<RequiredLqRow>> {
    cfg.validate()?;
    let pool = thread_pool()?;
    let steps = ((cfg.lq_ceiling - cfg.lq_floor) / cfg.lq_step).round() as usize;
    let lq_of = |i: usize| cfg.lq_floor + i as f64 * cfg.lq_step;
    let mut rows = Vec::new();
    for &mode in &cfg.modes {
        for &p_t in &cfg.p_t_list {
            let link = Link::new(params, mode, p_t)?;
            let trials = par_map(&pool, cfg.trials, |t| {
                link.prepare_reliability(cfg.profile, trial_seed(master, Experiment::RequiredLq, 0, t as u64))
            })?;
            let mut cache: std::collections::BTreeMap<usize, FailureEstimate> = Default::default();
            let mut eval = |i: usize| -> Result<FailureEstimate> {
                if let Some(e) = cache.get(&i) {
                    return Ok(*e);
                }
                let e = failure_at(&pool, &link, &trials, lq_of(i), cfg, trial_seed(master, Experiment::RequiredLq, 1, i as u64))?;
                cache.insert(i, e);
                Ok(e)
            };
            for &target in &cfg.targets {
                let top = eval(steps)?;
                let mut row = RequiredLqRow {
                    duplex_mode: mode.as_str(),
                    p_t_dbm: p_t,
                    target,
                    required_lq_db: None,
                    saturated: false,
                    failure_at_required: None,
                    failure_below: None,
                    trials: cfg.trials,
                };
                if !top.meets(target) {
                    row.saturated = true;
                    row.failure_at_required = Some(top.rate);
                    rows.push(row);
                    continue;
                }
                let bottom = eval(0)?;
                let (mut lo, mut hi) = (0usize, steps);
                if bottom.meets(target) {
                    hi = 0;
                } else {
                    while hi - lo > 1 {
                        let mid = lo + (hi - lo) / 2;
                        if eval(mid)?.meets(target) {
                            hi = mid;
                        } else {
                            lo = mid;
                        }
                    }
                    row.failure_below = Some(eval(lo)?.rate);
                }
                row.required_lq_db = Some(lq_of(hi));
                row.failure_at_required = Some(eval(hi)?.rate);
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

/// Decoded payload rate per mode and power, summed over both directions in
/// full duplex. LQ draws and channels are shared across modes.
pub fn run_throughput_experiment(params: &SystemParams, cfg: &ExperimentConfig, master: u64) -> Result<Vec<MeasurementRecord>> {
    cfg.validate()?;
    let pool = thread_pool()?;
    let opts = TrialOptions { timing: crate::link::Timing::Estimated(cfg.strategy), ..Default::default() };
    let mut records = Vec::new();
    for &mode in &cfg.modes {
        for (pi, &p_t) in cfg.p_t_list.iter().enumerate() {
            let link = Link::new(params, mode, p_t)?;
            let duration = link.params().frame_duration_s;
            let rows = par_map(&pool, cfg.trials, |t| {
                let seed = trial_seed(master, Experiment::Throughput, pi as u64, t as u64);
                let lq = uniform_lq(cfg, seed);
                let outcomes = link.run_trial(lq, cfg.profile, opts, seed)?;
                let first = &outcomes[0];
                let good: usize = outcomes.iter().filter(|o| o.sync_ok).map(|o| o.good_bits).sum();
                let bers: Vec<f64> = outcomes.iter().filter(|o| o.sync_ok).filter_map(|o| o.ber).collect();
                let all_ok = outcomes.iter().all(|o| o.sync_ok);
                Ok(MeasurementRecord {
                    trial_id: t,
                    duplex_mode: mode.as_str(),
                    p_t_dbm: p_t,
                    lq_db: lq,
                    sync_case: first.decision.case_taken.as_str(),
                    sync_ok: all_ok,
                    delta_frame_db: first.sync_ok.then_some(first.delta_frame_db).flatten(),
                    total_sic_db: None,
                    ber: all_ok.then(|| bers.iter().sum::<f64>() / bers.len() as f64),
                    throughput_bps: Some(good as f64 / duration),
                    seed,
                })
            })?;
            records.extend(rows);
        }
    }
    Ok(records)
}

/// Aggregates of one (mode, P_T[, LQ]) cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub duplex_mode: &'static str,
    pub p_t_dbm: f64,
    pub lq_db: Option<f64>,
    pub trials: usize,
    pub sync_successes: usize,
    pub sync_rate: f64,
    pub sync_lo: f64,
    pub sync_hi: f64,
    pub frame_successes: usize,
    pub frame_lo: f64,
    pub frame_hi: f64,
    pub median_delta_db: Option<f64>,
    pub median_total_sic_db: Option<f64>,
    pub mean_ber: Option<f64>,
    pub mean_throughput_bps: Option<f64>,
    pub gain_vs_hd: Option<f64>,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Per-cell aggregates in order of first appearance. With `by_lq` the LQ
/// value is part of the cell key.
pub fn summarize(records: &[MeasurementRecord], by_lq: bool) -> Vec<SummaryRow> {
    let mut keys: Vec<(&'static str, f64, Option<f64>)> = Vec::new();
    for r in records {
        let k = (r.duplex_mode, r.p_t_dbm, by_lq.then_some(r.lq_db));
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut rows: Vec<SummaryRow> = keys
        .into_iter()
        .map(|(mode, p_t, lq)| {
            let cell: Vec<&MeasurementRecord> = records
                .iter()
                .filter(|r| r.duplex_mode == mode && r.p_t_dbm == p_t && (lq.is_none() || Some(r.lq_db) == lq))
                .collect();
            let n = cell.len();
            let sync_successes = cell.iter().filter(|r| r.sync_ok).count();
            let frame_successes = cell.iter().filter(|r| r.ber == Some(0.0)).count();
            let (sync_lo, sync_hi) = wilson_interval(sync_successes, n);
            let (frame_lo, frame_hi) = wilson_interval(frame_successes, n);
            let mut deltas: Vec<f64> = cell.iter().filter_map(|r| r.delta_frame_db).collect();
            let mut totals: Vec<f64> = cell.iter().filter_map(|r| r.total_sic_db).collect();
            let bers: Vec<f64> = cell.iter().filter_map(|r| r.ber).collect();
            let rates: Vec<f64> = cell.iter().filter_map(|r| r.throughput_bps).collect();
            SummaryRow {
                duplex_mode: mode,
                p_t_dbm: p_t,
                lq_db: lq,
                trials: n,
                sync_successes,
                sync_rate: sync_successes as f64 / n as f64,
                sync_lo,
                sync_hi,
                frame_successes,
                frame_lo,
                frame_hi,
                median_delta_db: median(&mut deltas),
                median_total_sic_db: median(&mut totals),
                mean_ber: mean(&bers),
                mean_throughput_bps: (rates.len() == n).then(|| mean(&rates)).flatten(),
                gain_vs_hd: None,
            }
        })
        .collect();
    let hd = DuplexMode::HdSiso.as_str();
    let baseline: Vec<(f64, Option<f64>, f64)> = rows
        .iter()
        .filter(|r| r.duplex_mode == hd)
        .filter_map(|r| r.mean_throughput_bps.map(|t| (r.p_t_dbm, r.lq_db, t)))
        .collect();
    for r in &mut rows {
        if let (Some(t), Some(&(_, _, base))) =
            (r.mean_throughput_bps, baseline.iter().find(|b| b.0 == r.p_t_dbm && b.1 == r.lq_db))
        {
            r.gain_vs_hd = (base > 0.0).then(|| t / base);
        }
    }
    rows
}

/// Writes `rows` as CSV with an optional block of `# ` comment lines first.
pub fn write_csv<T: Serialize>(path: &Path, comments: &[String], rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for c in comments {
        buf.extend_from_slice(format!("# {c}\n").as_bytes());
    }
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    if rows.is_empty() {
        return Err(Error::Shape("no rows to write".into()));
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Budget table lines for the summary header, one per transmit power.
pub fn budget_comments(params: &SystemParams, p_t_list: &[f64]) -> Vec<String> {
    let mut out = vec![BudgetReport::HEADER.to_string()];
    out.extend(p_t_list.iter().map(|&p| BudgetReport::new(params, p, None).to_string()));
    out
}

/// `<dir>/<experiment>_<stamp>.csv`, with a numeric suffix if taken.
pub fn data_path(dir: &Path, experiment: Experiment, stamp: &str) -> PathBuf {
    let mut path = dir.join(format!("{experiment}_{stamp}.csv"));
    let mut k = 1;
    while path.exists() {
        path = dir.join(format!("{experiment}_{stamp}_{k}.csv"));
        k += 1;
    }
    path
}

/// Compact text table of summary rows for the terminal.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let opt = |v: Option<f64>, prec: usize| v.map_or("-".to_string(), |x| format!("{x:.prec$}"));
    let mut out = format!(
        "{:<8} {:>6} {:>6} {:>6} {:>7} {:>9} {:>9} {:>10} {:>12} {:>6}\n",
        "mode", "P_T", "LQ", "n", "sync", "delta", "sic", "ber", "bps", "gain"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<8} {:>6.1} {:>6} {:>6} {:>7.3} {:>9} {:>9} {:>10} {:>12} {:>6}\n",
            r.duplex_mode,
            r.p_t_dbm,
            opt(r.lq_db, 1),
            r.trials,
            r.sync_rate,
            opt(r.median_delta_db, 2),
            opt(r.median_total_sic_db, 2),
            r.mean_ber.map_or("-".to_string(), |b| format!("{b:.2e}")),
            opt(r.mean_throughput_bps, 0),
            opt(r.gain_vs_hd, 3),
        ));
    }
    out
}
