//! Radio, frame and impairment constants.
//!
//! [`SystemParams::default`] carries the prototype's transmission
//! parameters (20 MHz LTE numerology with extended CP). Everything can be
//! overridden from a TOML-style `key = value` file with optional dotted
//! sections, or with individual `key=value` overrides.

use std::path::Path;

use crate::error::{Error, Result};

/// All radio and frame constants shared by every module.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemParams {
    pub carrier_hz: f64,
    pub sample_rate: f64,
    pub fft_size: usize,
    pub cp_len: usize,
    pub subcarrier_spacing_hz: f64,
    pub n_data_subcarriers: usize,
    pub symbols_per_slot: usize,
    pub slots_per_frame: usize,
    pub frame_duration_s: f64,
    pub n_tx: usize,
    pub n_rx: usize,
    pub root_index_1: u32,
    pub root_index_2: u32,
    pub pss_len: usize,
    /// Divisor in the Zadoff-Chu exponent.
    pub zc_divisor: u32,
    pub nsp_threshold: f64,
    /// Correlation search window in samples; 0 selects one half-frame.
    pub nsp_window: usize,
    pub lpf_taps: usize,
    /// Low-pass cutoff as a multiple of the PSS half-bandwidth.
    pub lpf_cutoff_factor: f64,
    pub tx_power_dbm: f64,
    pub papr_margin_db: f64,
    pub noise_floor_dbm: f64,
    pub p1db_tx_dbm: f64,
    pub p1db_rx_dbm: f64,
    pub pa_smoothness: f64,
    pub lna_smoothness: f64,
    pub pa_enabled: bool,
    pub lna_enabled: bool,
    pub alpha_selftalk_db: f64,
    pub alpha_crosstalk_db: f64,
    /// Taps of the exponential power-delay profile.
    pub pdp_taps: usize,
    /// Power decay per tap of the exponential profile.
    pub pdp_decay_db: f64,
    /// Upper bound of the extra propagation delay of the desired path.
    pub max_delay_offset: usize,
    /// Upper bound of the self-interference path delay.
    pub max_self_delay: usize,
    /// Samples the FFT window is advanced into the cyclic prefix.
    pub fft_backoff: usize,
}

impl Default for SystemParams {
    fn default() -> Self {
        Self {
            carrier_hz: 2.52e9,
            sample_rate: 30.72e6,
            fft_size: 2048,
            cp_len: 512,
            subcarrier_spacing_hz: 15e3,
            n_data_subcarriers: 1200,
            symbols_per_slot: 6,
            slots_per_frame: 20,
            frame_duration_s: 10e-3,
            n_tx: 2,
            n_rx: 2,
            root_index_1: 25,
            root_index_2: 29,
            pss_len: 62,
            zc_divisor: 63,
            // 1 % false-alarm point of a noise-only scan over one half-frame
            // (see `sync::calibrate_threshold`).
            nsp_threshold: 4.4,
            nsp_window: 0,
            lpf_taps: 129,
            lpf_cutoff_factor: 1.4,
            tx_power_dbm: 23.0,
            papr_margin_db: 10.0,
            noise_floor_dbm: -90.0,
            p1db_tx_dbm: 30.0,
            p1db_rx_dbm: -15.0,
            pa_smoothness: 2.0,
            lna_smoothness: 3.0,
            pa_enabled: true,
            lna_enabled: true,
            alpha_selftalk_db: -43.0,
            alpha_crosstalk_db: -58.0,
            pdp_taps: 4,
            pdp_decay_db: 3.0,
            max_delay_offset: 32,
            max_self_delay: 2,
            fft_backoff: 128,
        }
    }
}

impl SystemParams {
    /// Checks the structural invariants of the numerology.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Param(msg));
        if !self.fft_size.is_power_of_two() {
            return fail(format!("fft_size {} is not a power of two", self.fft_size));
        }
        if self.cp_len >= self.fft_size {
            return fail(format!("cp_len {} must be below fft_size {}", self.cp_len, self.fft_size));
        }
        let rate = self.fft_size as f64 * self.subcarrier_spacing_hz;
        if (rate - self.sample_rate).abs() > 1e-6 * self.sample_rate {
            return fail(format!(
                "sample_rate {} differs from fft_size x subcarrier spacing = {}",
                self.sample_rate, rate
            ));
        }
        if self.n_data_subcarriers % 12 != 0
            || self.n_data_subcarriers == 0
            || self.n_data_subcarriers > self.fft_size - 1
        {
            return fail(format!(
                "n_data_subcarriers {} must be a positive multiple of 12 below fft_size",
                self.n_data_subcarriers
            ));
        }
        if self.pss_len != 62 || self.n_data_subcarriers < self.pss_len {
            return fail(format!("pss_len {} must be 62 and fit the data band", self.pss_len));
        }
        if self.symbols_per_slot < 6 {
            return fail("symbols_per_slot must be at least 6".into());
        }
        if self.slots_per_frame < 2 || self.slots_per_frame % 2 != 0 {
            return fail("slots_per_frame must be even and at least 2".into());
        }
        if !(1..=2).contains(&self.n_tx) || !(1..=2).contains(&self.n_rx) {
            return fail("n_tx and n_rx must be 1 or 2".into());
        }
        if self.lpf_taps % 2 == 0 || self.lpf_taps < 3 {
            return fail("lpf_taps must be odd".into());
        }
        if self.fft_backoff + self.max_delay_offset + self.max_self_delay + self.pdp_taps
            > self.cp_len
        {
            return fail("fft_backoff plus delay spread exceeds the cyclic prefix".into());
        }
        if self.search_window() + self.fft_size > self.frame_len() {
            return fail("nsp_window too large for one frame".into());
        }
        Ok(())
    }

    pub fn symbol_len(&self) -> usize {
        self.fft_size + self.cp_len
    }

    pub fn symbols_per_frame(&self) -> usize {
        self.symbols_per_slot * self.slots_per_frame
    }

    pub fn frame_len(&self) -> usize {
        self.symbols_per_frame() * self.symbol_len()
    }

    pub fn half_frame_len(&self) -> usize {
        self.frame_len() / 2
    }

    pub fn search_window(&self) -> usize {
        if self.nsp_window == 0 {
            self.half_frame_len()
        } else {
            self.nsp_window
        }
    }

    /// Frame symbols that carry the PSS: last symbol of the first slot of
    /// each half-frame.
    pub fn pss_symbols(&self) -> [usize; 2] {
        let last = self.symbols_per_slot - 1;
        [last, (self.slots_per_frame / 2) * self.symbols_per_slot + last]
    }

    /// Offset from the frame start to the first sample of the useful part of
    /// the first PSS symbol.
    pub fn pss_offset(&self) -> usize {
        self.pss_symbols()[0] * self.symbol_len() + self.cp_len
    }

    /// Per-sample noise variance in mW.
    pub fn noise_var(&self) -> f64 {
        dbm_to_mw(self.noise_floor_dbm)
    }

    /// Sets one parameter from its textual value. Dotted keys use the last
    /// segment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let name = key.rsplit('.').next().unwrap_or(key).trim();
        let value = value.trim().trim_matches('"');
        macro_rules! parse {
            ($field:expr) => {{
                $field = value
                    .parse()
                    .map_err(|_| Error::Config(format!("bad value {value:?} for {name}")))?;
            }};
        }
        match name {
            "carrier_hz" => parse!(self.carrier_hz),
            "sample_rate" => parse!(self.sample_rate),
            "fft_size" => parse!(self.fft_size),
            "cp_len" => parse!(self.cp_len),
            "subcarrier_spacing_hz" => parse!(self.subcarrier_spacing_hz),
            "n_data_subcarriers" => parse!(self.n_data_subcarriers),
            "symbols_per_slot" => parse!(self.symbols_per_slot),
            "slots_per_frame" => parse!(self.slots_per_frame),
            "frame_duration_s" => parse!(self.frame_duration_s),
            "n_tx" => parse!(self.n_tx),
            "n_rx" => parse!(self.n_rx),
            "root_index_1" => parse!(self.root_index_1),
            "root_index_2" => parse!(self.root_index_2),
            "pss_len" => parse!(self.pss_len),
            "zc_divisor" => parse!(self.zc_divisor),
            "nsp_threshold" => parse!(self.nsp_threshold),
            "nsp_window" => parse!(self.nsp_window),
            "lpf_taps" => parse!(self.lpf_taps),
            "lpf_cutoff_factor" => parse!(self.lpf_cutoff_factor),
            "tx_power_dbm" => parse!(self.tx_power_dbm),
            "papr_margin_db" => parse!(self.papr_margin_db),
            "noise_floor_dbm" => parse!(self.noise_floor_dbm),
            "p1db_tx_dbm" => parse!(self.p1db_tx_dbm),
            "p1db_rx_dbm" => parse!(self.p1db_rx_dbm),
            "pa_smoothness" => parse!(self.pa_smoothness),
            "lna_smoothness" => parse!(self.lna_smoothness),
            "pa_enabled" => parse!(self.pa_enabled),
            "lna_enabled" => parse!(self.lna_enabled),
            "alpha_selftalk_db" => parse!(self.alpha_selftalk_db),
            "alpha_crosstalk_db" => parse!(self.alpha_crosstalk_db),
            "pdp_taps" => parse!(self.pdp_taps),
            "pdp_decay_db" => parse!(self.pdp_decay_db),
            "max_delay_offset" => parse!(self.max_delay_offset),
            "max_self_delay" => parse!(self.max_self_delay),
            "fft_backoff" => parse!(self.fft_backoff),
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Parses a config text on top of the defaults. Keys the parameters do
    /// not know are handed to `unknown` (for experiment settings).
    pub fn from_config_str(
        text: &str,
        mut unknown: impl FnMut(&str, &str) -> Result<()>,
    ) -> Result<Self> {
        let mut params = Self::default();
        for (key, value) in flatten_config(text)? {
            match params.set(&key, &value) {
                Err(Error::UnknownKey(_)) => unknown(&key, &value)?,
                other => other?,
            }
        }
        params.validate()?;
        Ok(params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_config_str(&text, |k, _| Err(Error::UnknownKey(k.to_string())))
    }
}

/// Flattens a TOML document into `(dotted.key, value)` pairs, in document
/// order of sections.
pub fn flatten_config(text: &str) -> Result<Vec<(String, String)>> {
    let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
    let mut out = Vec::new();
    walk(&table, "", &mut out);
    Ok(out)
}

fn walk(table: &toml::Table, prefix: &str, out: &mut Vec<(String, String)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => walk(t, &key, out),
            toml::Value::String(s) => out.push((key, s.clone())),
            toml::Value::Array(items) => {
                let joined: Vec<String> = items
                    .iter()
                    .map(|i| match i {
                        toml::Value::String(s) => s.clone(),
                        other => other.to_string(),
                    })
                    .collect();
                out.push((key, joined.join(",")));
            }
            other => out.push((key, other.to_string())),
        }
    }
}

pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

pub fn mw_to_dbm(mw: f64) -> f64 {
    10.0 * mw.log10()
}

pub fn db_to_lin(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn lin_to_db(lin: f64) -> f64 {
    10.0 * lin.log10()
}
