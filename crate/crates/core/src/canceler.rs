//! Per-subcarrier digital self-interference cancellation.
//!
//! Both nodes transmit CRS on disjoint resource elements, so a receiver can
//! estimate the desired channel `H` from the partner's pilots and the
//! residual self-interference channel `G` from its own pilots in the same
//! frame. The own transmit lattice is known, which lets the receiver rebuild
//! and subtract the self-interference on every subcarrier.

use std::f64::consts::PI;

use crate::dsp::Cplx;
use crate::error::{Error, Result};
use crate::grid::{crs_port, crs_value, subcarrier_freq, DuplexMode, Lattice, NodeRole};
use crate::params::SystemParams;

const ZERO: Cplx = Cplx::new(0.0, 0.0);

/// Level reported when the residual vanishes.
pub const DELTA_FLOOR_DB: f64 = -200.0;
/// Level reported when a residual exists but the reference SI is zero.
pub const DELTA_CEIL_DB: f64 = 200.0;

/// One `n_rx x n_tx` matrix per subcarrier.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrices {
    pub n_rx: usize,
    pub n_tx: usize,
    pub n_sc: usize,
    pub data: Vec<Cplx>,
}

impl ChannelMatrices {
    pub fn zeros(n_rx: usize, n_tx: usize, n_sc: usize) -> Self {
        Self { n_rx, n_tx, n_sc, data: vec![ZERO; n_rx * n_tx * n_sc] }
    }

    #[inline]
    fn idx(&self, u: usize, i: usize, j: usize) -> usize {
        (u * self.n_rx + i) * self.n_tx + j
    }

    #[inline]
    pub fn get(&self, u: usize, i: usize, j: usize) -> Cplx {
        self.data[self.idx(u, i, j)]
    }

    #[inline]
    pub fn set(&mut self, u: usize, i: usize, j: usize, v: Cplx) {
        let k = self.idx(u, i, j);
        self.data[k] = v;
    }

    /// Row-major matrix of subcarrier `u`.
    pub fn at(&self, u: usize) -> &[Cplx] {
        let k = self.idx(u, 0, 0);
        &self.data[k..k + self.n_rx * self.n_tx]
    }

    /// Frequency response of tap-domain channels on the grid subcarriers.
    pub fn from_taps(
        taps: &[Vec<Vec<Cplx>>],
        delay: usize,
        advance: f64,
        params: &SystemParams,
    ) -> Self {
        let n_rx = taps.len();
        let n_tx = taps.first().map_or(0, Vec::len);
        let n_sc = params.n_data_subcarriers;
        let mut out = Self::zeros(n_rx, n_tx, n_sc);
        for u in 0..n_sc {
            let k = subcarrier_freq(u, n_sc);
            let ramp = advance_ramp(k, advance, params.fft_size);
            for (i, row) in taps.iter().enumerate() {
                for (j, t) in row.iter().enumerate() {
                    let h = crate::channel::ChannelRealization::response(t, delay, k, params.fft_size);
                    out.set(u, i, j, h * ramp);
                }
            }
        }
        out
    }
}

/// Phase a channel picks up on subcarrier `k` when the FFT window opens
/// `advance` samples before the symbol's nominal start.
#[inline]
pub fn advance_ramp(k: i64, advance: f64, fft_size: usize) -> Cplx {
    Cplx::from_polar(1.0, -2.0 * PI * k as f64 * advance / fft_size as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelEstimate {
    pub h_hat: ChannelMatrices,
    pub g_hat: ChannelMatrices,
    pub est_noise_var: f64,
}

/// FFT-window advances relative to the two signals' own symbol starts.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WindowAdvance {
    pub desired: f64,
    pub self_interference: f64,
}

/// Pilot cells `(symbol, subcarrier)` of every pattern port.
pub fn pilot_cells(params: &SystemParams, mode: DuplexMode) -> Vec<Vec<(usize, usize)>> {
    let ports = mode.pattern_ports();
    let mut cells = vec![Vec::new(); ports];
    for s in 0..params.symbols_per_frame() {
        for u in 0..params.n_data_subcarriers {
            if let Some(p) = crs_port(params, ports, s, u) {
                cells[p].push((s, u));
            }
        }
    }
    cells
}

/// Time-averaged LS estimates of one Rx/port pair: sorted `(k, value)` and
/// the residual energy and degrees of freedom around the averages.
fn ls_average(
    rx: &Lattice,
    i: usize,
    port: usize,
    cells: &[(usize, usize)],
    n_sc: usize,
) -> Result<(Vec<(i64, Cplx)>, f64, usize)> {
    let mut sum = vec![ZERO; n_sc];
    let mut count = vec![0usize; n_sc];
    let mut ls = Vec::with_capacity(cells.len());
    for &(s, u) in cells {
        let p = crs_value(port, s, u);
        if p.norm_sqr() == 0.0 {
            return Err(Error::DegeneratePilot { symbol: s, subcarrier: u });
        }
        let v = rx.get(i, s, u) / p;
        ls.push((u, v));
        sum[u] += v;
        count[u] += 1;
    }
    let mut points = Vec::new();
    for u in 0..n_sc {
        if count[u] > 0 {
            sum[u] /= count[u] as f64;
            points.push((subcarrier_freq(u, n_sc), sum[u]));
        }
    }
    let spread: f64 = ls.iter().map(|&(u, v)| (v - sum[u]).norm_sqr()).sum();
    let dof = ls.len() - points.len();
    Ok((points, spread, dof))
}

/// Linear interpolation over signed frequency, continued linearly past the
/// outermost pilots.
fn interpolate(points: &[(i64, Cplx)], k: i64) -> Cplx {
    let n = points.len();
    if n == 1 {
        return points[0].1;
    }
    let pos = points.partition_point(|&(kk, _)| kk < k);
    if pos < n && points[pos].0 == k {
        return points[pos].1;
    }
    let seg = pos.clamp(1, n - 1);
    let ((k0, v0), (k1, v1)) = (points[seg - 1], points[seg]);
    let t = (k - k0) as f64 / (k1 - k0) as f64;
    v0 * (1.0 - t) + v1 * t
}

fn estimate_block(
    rx: &Lattice,
    pattern_ports: &[usize],
    cells: &[Vec<(usize, usize)>],
    advance: f64,
    params: &SystemParams,
    spread: &mut (f64, usize),
) -> Result<ChannelMatrices> {
    let n_sc = params.n_data_subcarriers;
    let mut out = ChannelMatrices::zeros(rx.ports, pattern_ports.len(), n_sc);
    for i in 0..rx.ports {
        for (j, &port) in pattern_ports.iter().enumerate() {
            let (mut points, e, dof) = ls_average(rx, i, port, &cells[port], n_sc)?;
            spread.0 += e;
            spread.1 += dof;
            for (k, v) in points.iter_mut() {
                *v *= advance_ramp(*k, -advance, params.fft_size);
            }
            for u in 0..n_sc {
                let k = subcarrier_freq(u, n_sc);
                out.set(u, i, j, interpolate(&points, k) * advance_ramp(k, advance, params.fft_size));
            }
        }
    }
    Ok(out)
}

/// CRS-based estimates of `H` (partner's ports) and `G` (own ports) from a
/// received frame lattice. In half duplex `G` is zero.
pub fn estimate_channels(
    rx: &Lattice,
    params: &SystemParams,
    mode: DuplexMode,
    role: NodeRole,
    advance: WindowAdvance,
) -> Result<ChannelEstimate> {
    if rx.symbols != params.symbols_per_frame() || rx.subcarriers != params.n_data_subcarriers {
        return Err(Error::Shape(format!(
            "received lattice {}x{} does not match the numerology",
            rx.symbols, rx.subcarriers
        )));
    }
    let cells = pilot_cells(params, mode);
    let mut spread = (0.0, 0usize);
    let h_hat = estimate_block(
        rx,
        mode.node_ports(role.partner()),
        &cells,
        advance.desired,
        params,
        &mut spread,
    )?;
    let own = mode.node_ports(role);
    let g_hat = if mode.is_full_duplex() {
        estimate_block(rx, own, &cells, advance.self_interference, params, &mut spread)?
    } else {
        ChannelMatrices::zeros(rx.ports, own.len(), params.n_data_subcarriers)
    };
    let est_noise_var = if spread.1 > 0 { spread.0 / spread.1 as f64 } else { 0.0 };
    Ok(ChannelEstimate { h_hat, g_hat, est_noise_var })
}

/// `y_S,i[s,u] = sum_j g_ij[u] x_S,j[s,u]` on every cell.
pub fn rebuild_si(g_hat: &ChannelMatrices, own_tx: &Lattice) -> Result<Lattice> {
    if own_tx.ports != g_hat.n_tx || own_tx.subcarriers != g_hat.n_sc {
        return Err(Error::Shape(format!(
            "{} own ports x {} subcarriers against a {}x{} estimate",
            own_tx.ports, own_tx.subcarriers, g_hat.n_tx, g_hat.n_sc
        )));
    }
    let mut out = Lattice::zeros(g_hat.n_rx, own_tx.symbols, own_tx.subcarriers);
    for i in 0..g_hat.n_rx {
        for s in 0..own_tx.symbols {
            for u in 0..own_tx.subcarriers {
                let mut acc = ZERO;
                for j in 0..g_hat.n_tx {
                    acc += g_hat.get(u, i, j) * own_tx.get(j, s, u);
                }
                out.set(i, s, u, acc);
            }
        }
    }
    Ok(out)
}

pub fn subtract(rx: &Lattice, rebuilt: &Lattice) -> Result<Lattice> {
    if !rx.same_shape(rebuilt) {
        return Err(Error::Shape("received and rebuilt lattices differ in shape".into()));
    }
    let data = rx.data.iter().zip(&rebuilt.data).map(|(a, b)| a - b).collect();
    Ok(Lattice { data, ..rx.clone() })
}

/// Residual power `e`, reference power and per-cell level `delta_db`, plus
/// the frame level as an energy ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct CancellationTrace {
    pub residual: Vec<f64>,
    pub si_power: Vec<f64>,
    pub delta_db: Vec<f64>,
    pub delta_frame_db: f64,
}

/// Ratio in dB with the sentinel convention.
pub fn level_db(residual: f64, reference: f64) -> f64 {
    if residual == 0.0 {
        return DELTA_FLOOR_DB;
    }
    if reference == 0.0 {
        return DELTA_CEIL_DB;
    }
    (10.0 * (residual / reference).log10()).clamp(DELTA_FLOOR_DB, DELTA_CEIL_DB)
}

pub fn cancellation_metric(true_si: &Lattice, rebuilt: &Lattice) -> Result<CancellationTrace> {
    if !true_si.same_shape(rebuilt) {
        return Err(Error::Shape("true and rebuilt SI lattices differ in shape".into()));
    }
    let residual: Vec<f64> = true_si
        .data
        .iter()
        .zip(&rebuilt.data)
        .map(|(t, r)| {
            let (di, dq) = (t.re - r.re, t.im - r.im);
            di * di + dq * dq
        })
        .collect();
    let si_power: Vec<f64> = true_si.data.iter().map(|t| t.re * t.re + t.im * t.im).collect();
    let delta_db = residual.iter().zip(&si_power).map(|(&e, &p)| level_db(e, p)).collect();
    let delta_frame_db = level_db(residual.iter().sum(), si_power.iter().sum());
    Ok(CancellationTrace { residual, si_power, delta_db, delta_frame_db })
}
