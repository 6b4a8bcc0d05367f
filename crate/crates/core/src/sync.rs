//! Dual-root PSS timing synchronization.
//!
//! Each node sends a Zadoff-Chu PSS with its own root. A receiver low-pass
//! filters the stream of its first antenna, correlates against both roots
//! (the partner's for the desired signal, its own for self-interference),
//! scores each correlation by its normalized synchronization peak (NSP,
//! peak over mean) and picks the timing indices with the NSP-switching rule
//! in [`nsp_switch`].

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::{fast_fft_len, fft_convolve, Cplx, FftPair};
use crate::error::{Error, Result};
use crate::grid::SampleStream;
use crate::params::SystemParams;

const ZERO: Cplx = Cplx::new(0.0, 0.0);

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Length-62 Zadoff-Chu PSS, indexed by signed subcarrier `k` in
/// `-31..=-1` and `1..=31`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZcSequence {
    pub root: u32,
    pub values: Vec<Cplx>,
}

impl ZcSequence {
    /// Value at signed subcarrier `k` (0 at DC and outside the band).
    pub fn at(&self, k: i64) -> Cplx {
        match k {
            -31..=-1 => self.values[(k + 31) as usize],
            1..=31 => self.values[(k + 30) as usize],
            _ => ZERO,
        }
    }
}

pub fn zc_generate(root: u32, divisor: u32) -> Result<ZcSequence> {
    if root == 0 || gcd(root, divisor) != 1 {
        return Err(Error::Param(format!("root {root} is not coprime with {divisor}")));
    }
    let u = root as f64;
    let np = divisor as f64;
    let phase = |e: f64| Cplx::from_polar(1.0, -PI * u * e / np);
    let mut values = Vec::with_capacity(62);
    for k in -31i64..=-1 {
        let k = k as f64;
        values.push(phase(k * (k + 1.0)));
    }
    for k in 1i64..=31 {
        let k = k as f64;
        values.push(phase((k + 1.0) * (k + 2.0)));
    }
    Ok(ZcSequence { root, values })
}

/// Time-domain PSS template: N-point IDFT (1/N scaling) of the ZC sequence
/// on its subcarriers.
pub fn pss_reference(root: u32, params: &SystemParams) -> Result<SampleStream> {
    let zc = zc_generate(root, params.zc_divisor)?;
    let n = params.fft_size;
    let mut buf = vec![ZERO; n];
    for k in -31i64..=31 {
        buf[k.rem_euclid(n as i64) as usize] = zc.at(k);
    }
    FftPair::new(n).inverse(&mut buf);
    let scale = 1.0 / n as f64;
    buf.iter_mut().for_each(|x| *x *= scale);
    Ok(SampleStream::new(buf, params))
}

/// Linear-phase Hamming-windowed low-pass FIR with unity DC gain.
pub fn lowpass_taps(params: &SystemParams) -> Vec<f64> {
    let n = params.lpf_taps;
    let mid = (n - 1) as f64 / 2.0;
    let half_bw = (params.pss_len / 2) as f64 * params.subcarrier_spacing_hz;
    let fc = params.lpf_cutoff_factor * half_bw / params.sample_rate;
    let mut taps: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 - mid;
            let sinc = if t == 0.0 { 2.0 * fc } else { (2.0 * PI * fc * t).sin() / (PI * t) };
            let w = 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos();
            sinc * w
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Group-delay compensated FIR filtering; edges are zero-padded and the
/// output has the input's length.
pub fn lowpass(stream: &SampleStream, params: &SystemParams) -> SampleStream {
    let taps: Vec<Cplx> = lowpass_taps(params).into_iter().map(|t| Cplx::new(t, 0.0)).collect();
    let delay = (taps.len() - 1) / 2;
    let len = stream.samples.len();
    let full = fft_convolve(&stream.samples, &taps);
    let samples = full.into_iter().skip(delay).take(len).collect();
    SampleStream { samples, ..stream.clone() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NspReport {
    pub corr_1: Vec<f64>,
    pub corr_2: Vec<f64>,
    pub peak_idx_1: usize,
    pub peak_idx_2: usize,
    pub nsp_1: f64,
    pub nsp_2: f64,
}

impl NspReport {
    /// Report with only the scalar fields, for decision logic.
    pub fn from_peaks(peak_idx_1: usize, nsp_1: f64, peak_idx_2: usize, nsp_2: f64) -> Self {
        Self { corr_1: Vec::new(), corr_2: Vec::new(), peak_idx_1, peak_idx_2, nsp_1, nsp_2 }
    }

    fn from_corr(corr_1: Vec<f64>, corr_2: Vec<f64>) -> Self {
        let (peak_idx_1, nsp_1) = peak_and_nsp(&corr_1);
        let (peak_idx_2, nsp_2) = peak_and_nsp(&corr_2);
        Self { corr_1, corr_2, peak_idx_1, peak_idx_2, nsp_1, nsp_2 }
    }
}

fn peak_and_nsp(corr: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &c) in corr.iter().enumerate() {
        if c > corr[best] {
            best = i;
        }
    }
    let mean = corr.iter().sum::<f64>() / corr.len() as f64;
    let nsp = if mean > 0.0 { corr[best] / mean } else { 1.0 };
    (best, nsp)
}

/// Correlation magnitudes `|sum_n y[n+d] p*[n]|` for `d in 0..window`.
fn correlate(y: &[Cplx], p: &[Cplx], window: usize) -> Vec<f64> {
    let used = window + p.len() - 1;
    let n = fast_fft_len(used + p.len());
    let plan = FftPair::new(n);
    let mut a = vec![ZERO; n];
    let mut b = vec![ZERO; n];
    a[..used].copy_from_slice(&y[..used]);
    b[..p.len()].copy_from_slice(p);
    plan.forward(&mut a);
    plan.forward(&mut b);
    for (u, v) in a.iter_mut().zip(&b) {
        *u *= v.conj();
    }
    plan.inverse(&mut a);
    a[..window].iter().map(|c| c.norm() / n as f64).collect()
}

/// Cross-correlates a filtered stream with the desired (`refs[0]`) and
/// self (`refs[1]`) templates over the search window.
pub fn nsp_scan(
    filtered: &SampleStream,
    refs: [&SampleStream; 2],
    params: &SystemParams,
) -> Result<NspReport> {
    let window = params.search_window();
    let n = refs[0].samples.len();
    if window == 0 || window + n > filtered.samples.len() + 1 {
        return Err(Error::Param(format!(
            "search window {window} needs {} samples, stream has {}",
            window + n - 1,
            filtered.samples.len()
        )));
    }
    let corr_1 = correlate(&filtered.samples, &refs[0].samples, window);
    let corr_2 = correlate(&filtered.samples, &refs[1].samples, window);
    Ok(NspReport::from_corr(corr_1, corr_2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SyncCase {
    #[serde(rename = "both-pass")]
    BothPass,
    #[serde(rename = "desired-only")]
    DesiredOnly,
    #[serde(rename = "self-only")]
    SelfOnly,
    #[serde(rename = "fail")]
    Fail,
}

impl SyncCase {
    pub fn as_str(self) -> &'static str {
        match self {
            SyncCase::BothPass => "both-pass",
            SyncCase::DesiredOnly => "desired-only",
            SyncCase::SelfOnly => "self-only",
            SyncCase::Fail => "fail",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyncDecision {
    pub tau_desired: Option<usize>,
    pub tau_self: Option<usize>,
    pub case_taken: SyncCase,
}

/// Timing update from the two NSP feasibility tests.
pub fn nsp_switch(report: &NspReport, threshold: f64) -> SyncDecision {
    let (t1, t2) = (report.peak_idx_1, report.peak_idx_2);
    let (pass_1, pass_2) = (report.nsp_1 > threshold, report.nsp_2 > threshold);
    let (tau_desired, tau_self, case_taken) = match (pass_1, pass_2) {
        (true, true) => (Some(t1), Some(t2), SyncCase::BothPass),
        (true, false) => (Some(t1), Some(t1), SyncCase::DesiredOnly),
        (false, true) => (Some(t2), Some(t2), SyncCase::SelfOnly),
        (false, false) => (None, None, SyncCase::Fail),
    };
    SyncDecision { tau_desired, tau_self, case_taken }
}

/// Which NSP indices a receiver is allowed to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SyncStrategy {
    #[serde(rename = "switching")]
    Switching,
    #[serde(rename = "desired-only")]
    DesiredOnly,
    #[serde(rename = "self-only")]
    SelfOnly,
}

impl SyncStrategy {
    pub const ALL: [SyncStrategy; 3] =
        [SyncStrategy::Switching, SyncStrategy::DesiredOnly, SyncStrategy::SelfOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            SyncStrategy::Switching => "switching",
            SyncStrategy::DesiredOnly => "desired-only",
            SyncStrategy::SelfOnly => "self-only",
        }
    }

    pub fn decide(self, report: &NspReport, threshold: f64) -> SyncDecision {
        match self {
            SyncStrategy::Switching => nsp_switch(report, threshold),
            SyncStrategy::DesiredOnly => {
                let pass = report.nsp_1 > threshold;
                let t = pass.then_some(report.peak_idx_1);
                let case_taken = if pass { SyncCase::DesiredOnly } else { SyncCase::Fail };
                SyncDecision { tau_desired: t, tau_self: t, case_taken }
            }
            SyncStrategy::SelfOnly => {
                let pass = report.nsp_2 > threshold;
                let t = pass.then_some(report.peak_idx_2);
                let case_taken = if pass { SyncCase::SelfOnly } else { SyncCase::Fail };
                SyncDecision { tau_desired: t, tau_self: t, case_taken }
            }
        }
    }
}

impl std::str::FromStr for SyncStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SyncStrategy::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown sync strategy {s:?}")))
    }
}

/// Filtering plus dual-root correlation with plans and template spectra
/// prepared once; equivalent to [`lowpass`] followed by [`nsp_scan`] on the
/// leading samples of a stream.
#[derive(Debug, Clone)]
pub struct Synchronizer {
    window: usize,
    input_len: usize,
    plan: FftPair,
    kernels: [Vec<Cplx>; 2],
}

impl Synchronizer {
    pub fn new(params: &SystemParams, desired_root: u32, self_root: u32) -> Result<Self> {
        let window = params.search_window();
        let n = params.fft_size;
        let taps = lowpass_taps(params);
        let delay = (taps.len() - 1) / 2;
        // filtered output up to window + n - 1 needs `delay` look-ahead samples
        let input_len = window + n - 1 + delay;
        let fft_len = fast_fft_len(input_len + taps.len() + n);
        let plan = FftPair::new(fft_len);

        // centered filter: tap l sits at lag l - delay (wrapped)
        let mut filt = vec![ZERO; fft_len];
        for (l, &t) in taps.iter().enumerate() {
            let lag = (l as i64 - delay as i64).rem_euclid(fft_len as i64) as usize;
            filt[lag] = Cplx::new(t, 0.0);
        }
        plan.forward(&mut filt);

        let kernel = |root: u32| -> Result<Vec<Cplx>> {
            let p = pss_reference(root, params)?;
            let mut buf = vec![ZERO; fft_len];
            buf[..n].copy_from_slice(&p.samples);
            plan.forward(&mut buf);
            let scale = 1.0 / fft_len as f64;
            Ok(buf.iter().zip(&filt).map(|(pk, fk)| fk * pk.conj() * scale).collect())
        };
        let kernels = [kernel(desired_root)?, kernel(self_root)?];
        Ok(Self { window, input_len, plan, kernels })
    }

    /// Samples of the received stream the scan consumes.
    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn scan(&self, rx: &[Cplx]) -> Result<NspReport> {
        if rx.len() < self.input_len {
            return Err(Error::Bounds { index: 0, needed: self.input_len, len: rx.len() });
        }
        let mut spec = vec![ZERO; self.plan.len];
        spec[..self.input_len].copy_from_slice(&rx[..self.input_len]);
        self.plan.forward(&mut spec);
        let corr = |kernel: &[Cplx]| {
            let mut buf: Vec<Cplx> = spec.iter().zip(kernel).map(|(a, b)| a * b).collect();
            self.plan.inverse(&mut buf);
            buf[..self.window].iter().map(|c| c.norm()).collect::<Vec<f64>>()
        };
        let corr_1 = corr(&self.kernels[0]);
        let corr_2 = corr(&self.kernels[1]);
        Ok(NspReport::from_corr(corr_1, corr_2))
    }
}

/// Threshold exceeded by `max(nsp_1, nsp_2)` of noise-only scans with
/// probability `false_alarm`, estimated from `trials` scans.
pub fn calibrate_threshold(
    params: &SystemParams,
    trials: usize,
    false_alarm: f64,
    seed: u64,
) -> Result<f64> {
    let sync = Synchronizer::new(params, params.root_index_2, params.root_index_1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut peaks: Vec<f64> = (0..trials)
        .map(|_| {
            let noise: Vec<Cplx> = (0..sync.input_len())
                .map(|_| Cplx::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)))
                .collect();
            let r = sync.scan(&noise).expect("noise buffer sized to scan");
            r.nsp_1.max(r.nsp_2)
        })
        .collect();
    peaks.sort_by(|a, b| a.total_cmp(b));
    let rank = (((1.0 - false_alarm) * trials as f64).ceil() as usize).clamp(1, trials) - 1;
    Ok(peaks[rank])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_rows() {
        let r = NspReport::from_peaks(10, 5.0, 20, 5.0);
        let d = nsp_switch(&r, 2.0);
        assert_eq!((d.tau_desired, d.tau_self, d.case_taken), (Some(10), Some(20), SyncCase::BothPass));
        let r = NspReport::from_peaks(10, 5.0, 20, 1.0);
        let d = nsp_switch(&r, 2.0);
        assert_eq!((d.tau_desired, d.tau_self, d.case_taken), (Some(10), Some(10), SyncCase::DesiredOnly));
        let r = NspReport::from_peaks(10, 1.0, 20, 5.0);
        let d = nsp_switch(&r, 2.0);
        assert_eq!((d.tau_desired, d.tau_self, d.case_taken), (Some(20), Some(20), SyncCase::SelfOnly));
        let r = NspReport::from_peaks(10, 1.0, 20, 1.0);
        assert_eq!(nsp_switch(&r, 2.0).case_taken, SyncCase::Fail);
        // equality does not pass
        let r = NspReport::from_peaks(10, 2.0, 20, 2.0);
        assert_eq!(nsp_switch(&r, 2.0).case_taken, SyncCase::Fail);
    }

    #[test]
    fn non_coprime_root_rejected() {
        assert!(matches!(zc_generate(21, 63), Err(Error::Param(_))));
        assert!(zc_generate(25, 63).is_ok());
    }

    #[test]
    fn taps_are_symmetric_with_unit_dc() {
        let taps = lowpass_taps(&SystemParams::default());
        assert_eq!(taps.len(), 129);
        for i in 0..taps.len() {
            assert!((taps[i] - taps[taps.len() - 1 - i]).abs() < 1e-15);
        }
        assert!((taps.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
