//! Impairments between the two nodes: Rapp PA/LNA compression, the desired
//! MIMO channel `H`, the residual self-interference channel `G` left by the
//! passive isolation, propagation delays and receiver noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::Cplx;
use crate::error::{Error, Result};
use crate::grid::SampleStream;
use crate::params::{db_to_lin, dbm_to_mw, SystemParams};

/// Memoryless Rapp AM/AM amplifier, `y = g x / (1 + (g|x|/a_sat)^(2s))^(1/(2s))`.
/// Compression is referred to the input: an input of `p1db_dbm` comes out
/// exactly 1 dB below the linear prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PaModel {
    pub p1db_dbm: f64,
    pub small_signal_gain_db: f64,
    pub smoothness: f64,
    pub a_sat: f64,
}

impl PaModel {
    pub fn rapp(p1db_dbm: f64, small_signal_gain_db: f64, smoothness: f64) -> Self {
        let gain = db_to_lin(small_signal_gain_db).sqrt();
        let a_in = dbm_to_mw(p1db_dbm).sqrt();
        // solve (1 + r^(2s))^(1/(2s)) = 10^(1/20) for r = g a_in / a_sat
        let two_s = 2.0 * smoothness;
        let r = (10f64.powf(two_s / 20.0) - 1.0).powf(1.0 / two_s);
        Self { p1db_dbm, small_signal_gain_db, smoothness, a_sat: gain * a_in / r }
    }

    pub fn transmitter(params: &SystemParams) -> Self {
        Self::rapp(params.p1db_tx_dbm, 0.0, params.pa_smoothness)
    }

    pub fn receiver(params: &SystemParams) -> Self {
        Self::rapp(params.p1db_rx_dbm, 0.0, params.lna_smoothness)
    }

    #[inline]
    pub fn gain(&self) -> f64 {
        db_to_lin(self.small_signal_gain_db).sqrt()
    }

    #[inline]
    pub fn sample(&self, x: Cplx) -> Cplx {
        let g = self.gain();
        let k = g / self.a_sat;
        x * (g * self.attenuation(k * k * x.norm_sqr()))
    }

    /// `(1 + r2^s)^(-1/(2s))` for squared normalized amplitude `r2`.
    #[inline]
    fn attenuation(&self, r2: f64) -> f64 {
        let s = self.smoothness;
        let t = if s == 2.0 { r2 * r2 } else if s == 3.0 { r2 * r2 * r2 } else { r2.powf(s) };
        if t < 1e-5 {
            // binomial series of (1 + t)^(-a), truncation below 1e-20
            let a = 0.5 / s;
            return 1.0 - a * t * (1.0 - (a + 1.0) / 2.0 * t * (1.0 - (a + 2.0) / 3.0 * t));
        }
        if s == 2.0 {
            1.0 / (1.0 + t).sqrt().sqrt()
        } else if s == 3.0 {
            1.0 / (1.0 + t).sqrt().cbrt()
        } else {
            (1.0 + t).powf(-0.5 / s)
        }
    }

    pub fn apply_in_place(&self, samples: &mut [Cplx]) {
        let g = self.gain();
        let k = g / self.a_sat;
        let k2 = k * k;
        samples.iter_mut().for_each(|x| *x *= g * self.attenuation(k2 * x.norm_sqr()));
    }
}

/// Passes a stream through the amplifier. Samples are in the stream's power
/// reference, so they are rescaled to mW amplitude first.
pub fn pa_apply(stream: &SampleStream, model: &PaModel) -> SampleStream {
    let to_mw = dbm_to_mw(stream.power_ref_dbm).sqrt();
    let samples = stream.samples.iter().map(|&x| model.sample(x * to_mw) / to_mw).collect();
    SampleStream { samples, ..stream.clone() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Profile {
    /// One Rayleigh tap per antenna pair.
    #[serde(rename = "flat")]
    Flat,
    /// Rayleigh taps with an exponentially decaying power-delay profile.
    #[serde(rename = "exponential-pdp")]
    ExponentialPdp,
    /// Desired link: frequency-flat unitary matrix with random phases.
    /// Self-interference keeps the exponential profile.
    #[serde(rename = "static")]
    Static,
}

impl Profile {
    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Flat => "flat",
            Profile::ExponentialPdp => "exponential-pdp",
            Profile::Static => "static",
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(Profile::Flat),
            "exponential-pdp" => Ok(Profile::ExponentialPdp),
            "static" => Ok(Profile::Static),
            other => Err(Error::Config(format!("unknown channel profile {other:?}"))),
        }
    }
}

/// Tap gains indexed `[rx][tx][tap]`.
pub type TapMatrix = Vec<Vec<Vec<Cplx>>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRealization {
    pub h_taps: TapMatrix,
    pub g_taps: TapMatrix,
    pub delay_desired: usize,
    pub delay_self: usize,
    pub seed: u64,
}

impl ChannelRealization {
    /// Text form (JSON, complex taps as `[re, im]` pairs).
    pub fn to_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("realization serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn n_rx(&self) -> usize {
        self.h_taps.len()
    }

    pub fn n_tx(&self) -> usize {
        self.h_taps.first().map_or(0, Vec::len)
    }

    /// Frequency response of `taps[i][j]` at signed subcarrier `k`, including
    /// the propagation delay.
    pub fn response(taps: &[Cplx], delay: usize, k: i64, fft_size: usize) -> Cplx {
        let w = -2.0 * std::f64::consts::PI * k as f64 / fft_size as f64;
        taps.iter()
            .enumerate()
            .map(|(l, &t)| t * Cplx::from_polar(1.0, w * (l + delay) as f64))
            .sum()
    }
}

fn complex_normal(rng: &mut impl Rng, var: f64) -> Cplx {
    let s = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Cplx::new(re * s, im * s)
}

/// Unit-total-power exponential profile.
fn pdp(params: &SystemParams, profile: Profile) -> Vec<f64> {
    let taps = match profile {
        Profile::Flat => 1,
        _ => params.pdp_taps.max(1),
    };
    let raw: Vec<f64> = (0..taps).map(|l| db_to_lin(-params.pdp_decay_db * l as f64)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|p| p / total).collect()
}

fn rayleigh(rng: &mut impl Rng, pdp: &[f64], energy: f64) -> Vec<Cplx> {
    pdp.iter().map(|&p| complex_normal(rng, p * energy)).collect()
}

fn random_unitary(rng: &mut impl Rng, n: usize) -> Vec<Vec<Cplx>> {
    let mut phase = || Cplx::from_polar(1.0, rng.gen_range(0.0..std::f64::consts::TAU));
    if n == 1 {
        return vec![vec![phase()]];
    }
    let (a, b, d, rot) = (phase(), phase(), phase(), phase());
    let (s, c) = (rot.im, rot.re);
    // diag(a, b) * rotation * diag(1, d)
    vec![vec![a * c, -a * s * d], vec![b * s, b * c * d]]
}

/// Draws `H` and `G` for one direction of a link.
///
/// `H` is scaled so the mean desired power per receive antenna is
/// `lq_target_db` above the noise floor when every port transmits
/// `tx_power_dbm / n_tx`; `G` has mean energy `alpha_selftalk_db` on the
/// diagonal and `alpha_crosstalk_db` off it.
pub fn realize_channel(
    params: &SystemParams,
    lq_target_db: f64,
    profile: Profile,
    seed: u64,
) -> ChannelRealization {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_rx, n_tx) = (params.n_rx, params.n_tx);
    let desired_pdp = pdp(params, profile);
    let self_pdp = pdp(params, if profile == Profile::Flat { Profile::Flat } else { Profile::ExponentialPdp });

    let mut h_taps: TapMatrix = match profile {
        Profile::Static => random_unitary(&mut rng, n_rx.max(n_tx))
            .into_iter()
            .take(n_rx)
            .map(|row| row.into_iter().take(n_tx).map(|v| vec![v]).collect())
            .collect(),
        _ => (0..n_rx)
            .map(|_| (0..n_tx).map(|_| rayleigh(&mut rng, &desired_pdp, 1.0)).collect())
            .collect(),
    };
    let expected_energy = match profile {
        Profile::Static => h_taps.iter().flatten().flatten().map(|t| t.norm_sqr()).sum::<f64>(),
        _ => (n_rx * n_tx) as f64,
    };
    let p_port = dbm_to_mw(params.tx_power_dbm) / n_tx as f64;
    let lq = db_to_lin(lq_target_db);
    let c = (n_rx as f64 * lq * params.noise_var() / (p_port * expected_energy)).sqrt();
    h_taps.iter_mut().flatten().flatten().for_each(|t| *t *= c);

    let g_taps: TapMatrix = (0..n_rx)
        .map(|i| {
            (0..n_tx)
                .map(|j| {
                    let alpha =
                        if i == j { params.alpha_selftalk_db } else { params.alpha_crosstalk_db };
                    rayleigh(&mut rng, &self_pdp, db_to_lin(alpha))
                })
                .collect()
        })
        .collect();

    let delay_self = rng.gen_range(0..=params.max_self_delay);
    let delay_desired = delay_self + rng.gen_range(0..=params.max_delay_offset);
    ChannelRealization { h_taps, g_taps, delay_desired, delay_self, seed }
}

/// Each output row is `sum_j sum_l taps[j][l] x_j[n - l - delay]`.
fn apply_matrix<S: AsRef<[Cplx]>>(taps: &TapMatrix, delay: usize, tx: &[S], len: usize) -> Vec<Vec<Cplx>> {
    taps.iter()
        .map(|row| {
            let terms: Vec<(&[Cplx], usize, Cplx)> = row
                .iter()
                .zip(tx)
                .flat_map(|(t, x)| {
                    t.iter()
                        .enumerate()
                        .filter(|(_, c)| **c != Cplx::new(0.0, 0.0))
                        .map(move |(l, &c)| (x.as_ref(), l + delay, c))
                })
                .collect();
            let mut out = vec![Cplx::new(0.0, 0.0); len];
            // blocked so each output chunk stays in cache across terms
            for start in (0..len).step_by(4096) {
                let end = (start + 4096).min(len);
                for &(x, shift, c) in &terms {
                    let from = start.max(shift);
                    if from >= end {
                        continue;
                    }
                    for (o, &v) in out[from..end].iter_mut().zip(&x[from - shift..end - shift]) {
                        *o += c * v;
                    }
                }
            }
            out
        })
        .collect()
}

/// Noise-free received components at each Rx antenna.
#[derive(Debug, Clone, PartialEq)]
pub struct RxComponents {
    pub desired: Vec<Vec<Cplx>>,
    pub self_interference: Vec<Vec<Cplx>>,
}

fn check_streams<S: AsRef<[Cplx]>>(streams: &[S], want: usize, len: usize, what: &str) -> Result<()> {
    if streams.len() != want {
        return Err(Error::Shape(format!("{what}: {} streams for {want} ports", streams.len())));
    }
    if let Some(s) = streams.iter().find(|s| s.as_ref().len() != len) {
        return Err(Error::Shape(format!("{what}: stream of {} samples, expected {len}", s.as_ref().len())));
    }
    Ok(())
}

pub fn propagate_components<S: AsRef<[Cplx]>>(
    tx_self: &[S],
    tx_partner: &[S],
    ch: &ChannelRealization,
) -> Result<RxComponents> {
    let len = tx_partner.first().map_or(0, |s| s.as_ref().len());
    check_streams(tx_partner, ch.n_tx(), len, "partner")?;
    let g_tx = ch.g_taps.first().map_or(0, Vec::len);
    check_streams(tx_self, g_tx, len, "own")?;
    Ok(RxComponents {
        desired: apply_matrix(&ch.h_taps, ch.delay_desired, tx_partner, len),
        self_interference: apply_matrix(&ch.g_taps, ch.delay_self, tx_self, len),
    })
}

/// Adds circular complex Gaussian noise of variance `var` per sample.
pub fn add_awgn(samples: &mut [Cplx], var: f64, rng: &mut impl Rng) {
    samples.iter_mut().for_each(|s| *s += complex_normal(rng, var));
}

/// Received streams at the own Rx antennas: desired plus self-interference,
/// plus noise at the configured floor when `noise` carries a generator.
pub fn propagate<R: Rng>(
    tx_self: &[SampleStream],
    tx_partner: &[SampleStream],
    ch: &ChannelRealization,
    params: &SystemParams,
    noise: Option<&mut R>,
) -> Result<Vec<SampleStream>> {
    let rate = tx_partner.first().map_or(params.sample_rate, |s| s.rate);
    if tx_self.iter().chain(tx_partner).any(|s| s.rate != rate) {
        return Err(Error::Shape("sample rates differ".into()));
    }
    let own: Vec<&[Cplx]> = tx_self.iter().map(|s| s.samples.as_slice()).collect();
    let partner: Vec<&[Cplx]> = tx_partner.iter().map(|s| s.samples.as_slice()).collect();
    let parts = propagate_components(&own, &partner, ch)?;
    let power_ref_dbm = tx_partner.first().map_or(0.0, |s| s.power_ref_dbm);
    let var = dbm_to_mw(params.noise_floor_dbm - power_ref_dbm);
    let mut noise = noise;
    Ok(parts
        .desired
        .into_iter()
        .zip(parts.self_interference)
        .map(|(mut y, si)| {
            y.iter_mut().zip(&si).for_each(|(a, b)| *a += b);
            if let Some(rng) = noise.as_deref_mut() {
                add_awgn(&mut y, var, rng);
            }
            SampleStream { samples: y, rate, power_ref_dbm }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compression_point_is_one_db() {
        for s in [1.0, 2.0, 3.0, 5.0] {
            let pa = PaModel::rapp(30.0, 0.0, s);
            let a = dbm_to_mw(30.0).sqrt();
            let y = pa.sample(Cplx::new(a, 0.0));
            assert!((20.0 * (y.norm() / a).log10() + 1.0).abs() < 1e-12);
        }
        let pa = PaModel::rapp(30.0, 0.0, 2.0);
        assert!((pa.a_sat / dbm_to_mw(30.0).sqrt() - 1.1435).abs() < 1e-3);
    }

    #[test]
    fn realization_is_deterministic() {
        let p = SystemParams::default();
        let a = realize_channel(&p, 10.0, Profile::ExponentialPdp, 7);
        let b = realize_channel(&p, 10.0, Profile::ExponentialPdp, 7);
        assert_eq!(a, b);
        assert!(a.delay_self <= a.delay_desired);
        assert!(a.delay_desired - a.delay_self < p.cp_len);
        let back = ChannelRealization::from_text(&a.to_text()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn static_profile_rows_have_equal_energy() {
        let p = SystemParams::default();
        let ch = realize_channel(&p, 20.0, Profile::Static, 3);
        let rows: Vec<f64> =
            ch.h_taps.iter().map(|r| r.iter().flatten().map(|t| t.norm_sqr()).sum()).collect();
        assert!((rows[0] - rows[1]).abs() < 1e-12 * rows[0]);
    }
}
