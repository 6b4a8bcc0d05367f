//! Frame construction: resource-grid layout (data, CRS, PSS, nulls), QPSK
//! mapping and the CP-OFDM modulator/demodulator.
//!
//! Subcarriers inside a grid are indexed `u = 0..n_data_subcarriers` from
//! the lowest used frequency upward; the DC bin sits between
//! `u = n/2 - 1` and `u = n/2` and is never used.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dsp::{Cplx, FftPair};
use crate::error::{Error, Result};
use crate::params::SystemParams;
use crate::sync::zc_generate;

const ZERO: Cplx = Cplx::new(0.0, 0.0);

/// Gray-mapped QPSK: `(b0, b1) -> ((1 - 2 b0) + j (1 - 2 b1)) / sqrt(2)`.
pub fn qpsk_modulate(bits: &[u8]) -> Result<Vec<Cplx>> {
    if bits.len() % 2 != 0 {
        return Err(Error::Shape(format!("QPSK needs an even bit count, got {}", bits.len())));
    }
    Ok(bits.chunks_exact(2).map(|b| qpsk_point(b[0], b[1])).collect())
}

#[inline]
pub fn qpsk_point(b0: u8, b1: u8) -> Cplx {
    let a = std::f64::consts::FRAC_1_SQRT_2;
    Cplx::new(if b0 == 0 { a } else { -a }, if b1 == 0 { a } else { -a })
}

/// Hard decision for one symbol.
#[inline]
pub fn qpsk_demap(s: Cplx) -> [u8; 2] {
    [(s.re < 0.0) as u8, (s.im < 0.0) as u8]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellKind {
    Data,
    Crs,
    Pss,
    Null,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeRole {
    A,
    B,
}

impl NodeRole {
    pub fn partner(self) -> Self {
        match self {
            NodeRole::A => NodeRole::B,
            NodeRole::B => NodeRole::A,
        }
    }

    /// Root of the PSS this node transmits.
    pub fn pss_root(self, params: &SystemParams) -> u32 {
        match self {
            NodeRole::A => params.root_index_1,
            NodeRole::B => params.root_index_2,
        }
    }
}

/// Frame format of a link, which fixes the joint CRS pattern and the ports
/// each node drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DuplexMode {
    #[serde(rename = "hd-siso")]
    HdSiso,
    #[serde(rename = "fd-siso")]
    FdSiso,
    #[serde(rename = "fd-mimo")]
    FdMimo,
}

impl DuplexMode {
    pub const ALL: [DuplexMode; 3] = [DuplexMode::HdSiso, DuplexMode::FdSiso, DuplexMode::FdMimo];

    /// Number of CRS ports in the joint pattern.
    pub fn pattern_ports(self) -> usize {
        match self {
            DuplexMode::HdSiso => 1,
            DuplexMode::FdSiso => 2,
            DuplexMode::FdMimo => 4,
        }
    }

    /// Pattern ports driven by `role`, in local antenna order.
    pub fn node_ports(self, role: NodeRole) -> &'static [usize] {
        match (self, role) {
            (DuplexMode::HdSiso, _) => &[0],
            (DuplexMode::FdSiso, NodeRole::A) => &[0],
            (DuplexMode::FdSiso, NodeRole::B) => &[1],
            (DuplexMode::FdMimo, NodeRole::A) => &[0, 1],
            (DuplexMode::FdMimo, NodeRole::B) => &[2, 3],
        }
    }

    pub fn antennas(self) -> usize {
        match self {
            DuplexMode::FdMimo => 2,
            _ => 1,
        }
    }

    pub fn is_full_duplex(self) -> bool {
        self != DuplexMode::HdSiso
    }

    /// Copy of `params` with the antenna counts of this mode.
    pub fn params(self, params: &SystemParams) -> SystemParams {
        SystemParams { n_tx: self.antennas(), n_rx: self.antennas(), ..params.clone() }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DuplexMode::HdSiso => "hd-siso",
            DuplexMode::FdSiso => "fd-siso",
            DuplexMode::FdMimo => "fd-mimo",
        }
    }
}

impl fmt::Display for DuplexMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DuplexMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hd-siso" => Ok(DuplexMode::HdSiso),
            "fd-siso" => Ok(DuplexMode::FdSiso),
            "fd-mimo" => Ok(DuplexMode::FdMimo),
            other => Err(Error::Config(format!("unknown duplex mode {other:?}"))),
        }
    }
}

/// Complex values on a `[port x symbol x subcarrier]` lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    pub ports: usize,
    pub symbols: usize,
    pub subcarriers: usize,
    pub data: Vec<Cplx>,
}

impl Lattice {
    pub fn zeros(ports: usize, symbols: usize, subcarriers: usize) -> Self {
        Self { ports, symbols, subcarriers, data: vec![ZERO; ports * symbols * subcarriers] }
    }

    pub fn for_params(params: &SystemParams, ports: usize) -> Self {
        Self::zeros(ports, params.symbols_per_frame(), params.n_data_subcarriers)
    }

    #[inline]
    pub fn idx(&self, port: usize, symbol: usize, sc: usize) -> usize {
        (port * self.symbols + symbol) * self.subcarriers + sc
    }

    #[inline]
    pub fn get(&self, port: usize, symbol: usize, sc: usize) -> Cplx {
        self.data[self.idx(port, symbol, sc)]
    }

    #[inline]
    pub fn set(&mut self, port: usize, symbol: usize, sc: usize, v: Cplx) {
        let i = self.idx(port, symbol, sc);
        self.data[i] = v;
    }

    pub fn symbol(&self, port: usize, symbol: usize) -> &[Cplx] {
        let i = self.idx(port, symbol, 0);
        &self.data[i..i + self.subcarriers]
    }

    pub fn symbol_mut(&mut self, port: usize, symbol: usize) -> &mut [Cplx] {
        let i = self.idx(port, symbol, 0);
        &mut self.data[i..i + self.subcarriers]
    }

    pub fn same_shape(&self, other: &Lattice) -> bool {
        self.ports == other.ports
            && self.symbols == other.symbols
            && self.subcarriers == other.subcarriers
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }
}

/// A node's transmit grid: lattice values plus the occupancy tag of every
/// cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ResourceGrid {
    pub cells: Lattice,
    pub occupancy: Vec<CellKind>,
    pub mode: DuplexMode,
    pub role: NodeRole,
}

impl ResourceGrid {
    pub fn kind(&self, port: usize, symbol: usize, sc: usize) -> CellKind {
        self.occupancy[self.cells.idx(port, symbol, sc)]
    }
}

/// Signed frequency index of grid subcarrier `u` (DC excluded).
#[inline]
pub fn subcarrier_freq(u: usize, n_sc: usize) -> i64 {
    let half = (n_sc / 2) as i64;
    let u = u as i64;
    if u < half {
        u - half
    } else {
        u - half + 1
    }
}

/// Grid subcarrier of a signed frequency index, if inside the used band.
pub fn subcarrier_of_freq(k: i64, n_sc: usize) -> Option<usize> {
    let half = (n_sc / 2) as i64;
    if k == 0 || k < -half || k > half {
        return None;
    }
    Some(if k < 0 { (k + half) as usize } else { (k + half - 1) as usize })
}

/// FFT bin of grid subcarrier `u`.
#[inline]
pub fn fft_bin(u: usize, n_sc: usize, fft_size: usize) -> usize {
    subcarrier_freq(u, n_sc).rem_euclid(fft_size as i64) as usize
}

/// Pattern port owning a CRS at frame symbol `symbol`, subcarrier `u`, in
/// an LTE-style pattern with `ports` antenna ports (extended CP, cell
/// shift 0).
pub fn crs_port(params: &SystemParams, ports: usize, symbol: usize, u: usize) -> Option<usize> {
    let slot = symbol / params.symbols_per_slot;
    let l = symbol % params.symbols_per_slot;
    let third = params.symbols_per_slot - 3;
    let m = u % 6;
    let odd = slot % 2;
    let owner = if l == 0 {
        match m {
            0 => Some(0),
            3 => Some(1),
            _ => None,
        }
    } else if l == third {
        match m {
            3 => Some(0),
            0 => Some(1),
            _ => None,
        }
    } else if l == 1 {
        if m == 3 * odd {
            Some(2)
        } else if m == (3 + 3 * odd) % 6 {
            Some(3)
        } else {
            None
        }
    } else {
        None
    };
    owner.filter(|&p| p < ports)
}

/// Known CRS value of a pattern port at a cell: a fixed pseudo-random
/// unit-modulus QPSK point.
pub fn crs_value(port: usize, symbol: usize, u: usize) -> Cplx {
    let mut z = (port as u64) << 48 ^ (symbol as u64) << 24 ^ u as u64;
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    qpsk_point((z & 1) as u8, ((z >> 1) & 1) as u8)
}

pub fn is_pss_cell(params: &SystemParams, symbol: usize, u: usize) -> bool {
    if !params.pss_symbols().contains(&symbol) {
        return false;
    }
    let k = subcarrier_freq(u, params.n_data_subcarriers);
    let half = (params.pss_len / 2) as i64;
    (-half..=half).contains(&k)
}

/// Occupancy of one node's ports for `mode`.
pub fn occupancy(params: &SystemParams, mode: DuplexMode, role: NodeRole) -> Vec<CellKind> {
    let ports = mode.node_ports(role);
    let symbols = params.symbols_per_frame();
    let n_sc = params.n_data_subcarriers;
    let mut out = Vec::with_capacity(ports.len() * symbols * n_sc);
    for (local, &pattern_port) in ports.iter().enumerate() {
        for s in 0..symbols {
            for u in 0..n_sc {
                let kind = match crs_port(params, mode.pattern_ports(), s, u) {
                    Some(p) if p == pattern_port => CellKind::Crs,
                    Some(_) => CellKind::Null,
                    None if is_pss_cell(params, s, u) => {
                        if local == 0 {
                            CellKind::Pss
                        } else {
                            CellKind::Null
                        }
                    }
                    None => CellKind::Data,
                };
                out.push(kind);
            }
        }
    }
    out
}

/// Data cells of a port, in the order payload bits are mapped: symbol-major,
/// then ascending subcarrier.
pub fn data_cells(params: &SystemParams, mode: DuplexMode) -> Vec<(usize, usize)> {
    let n_sc = params.n_data_subcarriers;
    let mut cells = Vec::new();
    for s in 0..params.symbols_per_frame() {
        for u in 0..n_sc {
            if crs_port(params, mode.pattern_ports(), s, u).is_none() && !is_pss_cell(params, s, u)
            {
                cells.push((s, u));
            }
        }
    }
    cells
}

/// Payload bits per port carried by one frame.
pub fn data_capacity(params: &SystemParams, mode: DuplexMode) -> usize {
    let n_sc = params.n_data_subcarriers;
    let free = (0..params.symbols_per_frame())
        .flat_map(|s| (0..n_sc).map(move |u| (s, u)))
        .filter(|&(s, u)| crs_port(params, mode.pattern_ports(), s, u).is_none() && !is_pss_cell(params, s, u))
        .count();
    2 * free
}

/// Populates one node's frame: QPSK payload on data cells, CRS on its
/// pattern ports, PSS on its first port and nulls everywhere else.
pub fn build_frame(
    params: &SystemParams,
    payload_bits: &[Vec<u8>],
    mode: DuplexMode,
    role: NodeRole,
) -> Result<ResourceGrid> {
    let ports = mode.node_ports(role);
    if payload_bits.len() != ports.len() {
        return Err(Error::Shape(format!(
            "{} payload streams for {} ports",
            payload_bits.len(),
            ports.len()
        )));
    }
    let capacity = data_capacity(params, mode);
    if let Some(bad) = payload_bits.iter().find(|b| b.len() != capacity) {
        return Err(Error::Capacity { expected: capacity, given: bad.len() });
    }
    let occupancy = occupancy(params, mode, role);
    let mut cells = Lattice::for_params(params, ports.len());
    let zc = zc_generate(role.pss_root(params), params.zc_divisor)?;
    let per_port = cells.symbols * cells.subcarriers;
    for (local, &pattern_port) in ports.iter().enumerate() {
        let mut symbols = qpsk_modulate(&payload_bits[local])?.into_iter();
        let base = local * per_port;
        for (i, kind) in occupancy[base..base + per_port].iter().enumerate() {
            let (s, u) = (i / cells.subcarriers, i % cells.subcarriers);
            let v = match kind {
                CellKind::Data => symbols.next().unwrap_or(ZERO),
                CellKind::Crs => crs_value(pattern_port, s, u),
                CellKind::Pss => zc.at(subcarrier_freq(u, params.n_data_subcarriers)),
                CellKind::Null => continue,
            };
            cells.data[base + i] = v;
        }
    }
    Ok(ResourceGrid { cells, occupancy, mode, role })
}

/// Complex baseband samples of one antenna port. A sample of unit mean
/// square corresponds to `power_ref_dbm`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleStream {
    pub samples: Vec<Cplx>,
    pub rate: f64,
    pub power_ref_dbm: f64,
}

impl SampleStream {
    pub fn new(samples: Vec<Cplx>, params: &SystemParams) -> Self {
        Self { samples, rate: params.sample_rate, power_ref_dbm: 0.0 }
    }
}

/// CP-OFDM modulator/demodulator with unitary transform scaling.
#[derive(Debug, Clone)]
pub struct Ofdm {
    fft_size: usize,
    cp_len: usize,
    n_sc: usize,
    symbols: usize,
    bins: Vec<usize>,
    plan: FftPair,
}

impl Ofdm {
    pub fn new(params: &SystemParams) -> Self {
        let n_sc = params.n_data_subcarriers;
        Self {
            fft_size: params.fft_size,
            cp_len: params.cp_len,
            n_sc,
            symbols: params.symbols_per_frame(),
            bins: (0..n_sc).map(|u| fft_bin(u, n_sc, params.fft_size)).collect(),
            plan: FftPair::new(params.fft_size),
        }
    }

    pub fn symbol_len(&self) -> usize {
        self.fft_size + self.cp_len
    }

    /// Time samples of the first `n_symbols` symbols of every port.
    pub fn modulate_symbols(&self, grid: &Lattice, n_symbols: usize) -> Result<Vec<Vec<Cplx>>> {
        self.modulate_range(grid, 0..n_symbols.min(grid.symbols))
    }

    /// Time samples of the symbols in `range`, concatenated, for every port.
    pub fn modulate_range(&self, grid: &Lattice, range: Range<usize>) -> Result<Vec<Vec<Cplx>>> {
        if grid.subcarriers != self.n_sc || grid.symbols != self.symbols {
            return Err(Error::Shape(format!(
                "grid is {}x{}, numerology expects {}x{}",
                grid.symbols, grid.subcarriers, self.symbols, self.n_sc
            )));
        }
        if range.end > grid.symbols {
            return Err(Error::Bounds { index: range.start, needed: range.len(), len: grid.symbols });
        }
        let n = self.fft_size;
        let scale = 1.0 / (n as f64).sqrt();
        let mut buf = vec![ZERO; n];
        let mut out = Vec::with_capacity(grid.ports);
        for port in 0..grid.ports {
            let mut stream = Vec::with_capacity(range.len() * self.symbol_len());
            for s in range.clone() {
                buf.iter_mut().for_each(|b| *b = ZERO);
                for (&bin, &v) in self.bins.iter().zip(grid.symbol(port, s)) {
                    buf[bin] = v;
                }
                self.plan.inverse(&mut buf);
                stream.extend(buf[n - self.cp_len..].iter().map(|&x| x * scale));
                stream.extend(buf.iter().map(|&x| x * scale));
            }
            out.push(stream);
        }
        Ok(out)
    }

    pub fn modulate(&self, grid: &Lattice) -> Result<Vec<Vec<Cplx>>> {
        self.modulate_symbols(grid, self.symbols)
    }

    /// Strips the CP of each symbol of the frame starting at `start` and
    /// returns the used subcarriers of every stream.
    pub fn demodulate<S: AsRef<[Cplx]>>(&self, streams: &[S], start: usize) -> Result<Lattice> {
        let frame = self.symbols * self.symbol_len();
        let mut out = Lattice::zeros(streams.len(), self.symbols, self.n_sc);
        let n = self.fft_size;
        let scale = 1.0 / (n as f64).sqrt();
        let mut buf = vec![ZERO; n];
        for (port, stream) in streams.iter().enumerate() {
            let stream = stream.as_ref();
            if start + frame > stream.len() {
                return Err(Error::Bounds { index: start, needed: frame, len: stream.len() });
            }
            for s in 0..self.symbols {
                let at = start + s * self.symbol_len() + self.cp_len;
                buf.copy_from_slice(&stream[at..at + n]);
                self.plan.forward(&mut buf);
                for (o, &bin) in out.symbol_mut(port, s).iter_mut().zip(&self.bins) {
                    *o = buf[bin] * scale;
                }
            }
        }
        Ok(out)
    }
}

/// One stream per Tx port of `grid`.
pub fn ofdm_modulate(grid: &ResourceGrid, params: &SystemParams) -> Result<Vec<SampleStream>> {
    Ok(Ofdm::new(params)
        .modulate(&grid.cells)?
        .into_iter()
        .map(|s| SampleStream::new(s, params))
        .collect())
}

pub fn ofdm_demodulate(
    streams: &[SampleStream],
    start_index: usize,
    params: &SystemParams,
) -> Result<Lattice> {
    let raw: Vec<&[Cplx]> = streams.iter().map(|s| s.samples.as_slice()).collect();
    Ofdm::new(params).demodulate(&raw, start_index)
}
