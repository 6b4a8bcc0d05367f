//! One frame exchanged over a link.
//!
//! Both nodes build a frame, modulate it, drive it through their PA and the
//! channel; each receiving node passes the sum of desired signal,
//! self-interference and noise through its LNA, synchronizes, estimates the
//! channels from the CRS, cancels its own signal and detects the partner's
//! payload with zero forcing.
//!
//! Transmitters send frames back to back. Each simulated stream holds one
//! frame with the last symbol of the previous frame in front and the first
//! symbol of the next frame behind, so that FFT windows opened early (inside
//! the cyclic prefix) and delayed arrivals always see periodic signal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::canceler::{
    cancellation_metric, estimate_channels, pilot_cells, rebuild_si, subtract, ChannelEstimate,
    ChannelMatrices, WindowAdvance,
};
use crate::channel::{
    add_awgn, propagate_components, realize_channel, ChannelRealization, PaModel, Profile,
};
use crate::detector::{detect, zf_matrix};
use crate::dsp::{q_function, Cplx};
use crate::error::{Error, Result};
use crate::grid::{build_frame, data_capacity, data_cells, DuplexMode, Lattice, NodeRole, Ofdm, ResourceGrid};
use crate::params::{db_to_lin, dbm_to_mw, lin_to_db, SystemParams};
use crate::sync::{NspReport, SyncCase, SyncDecision, SyncStrategy, Synchronizer};

const ZERO: Cplx = Cplx::new(0.0, 0.0);
/// Subcarriers per resource block, the unit of block-level success.
pub const RB_SUBCARRIERS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Timing {
    /// Receiver knows the true arrival times.
    Genie,
    /// Receiver runs the dual-root scan with the given strategy.
    Estimated(SyncStrategy),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Csi {
    Estimated,
    /// Receiver uses the true channel responses.
    Genie,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialOptions {
    pub timing: Timing,
    pub csi: Csi,
    pub noise: bool,
    /// Full duplex only: also receive at node B.
    pub both_directions: bool,
}

impl Default for TrialOptions {
    fn default() -> Self {
        Self {
            timing: Timing::Estimated(SyncStrategy::Switching),
            csi: Csi::Estimated,
            noise: true,
            both_directions: true,
        }
    }
}

/// Result of receiving one frame at one node.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionOutcome {
    pub receiver: NodeRole,
    pub decision: SyncDecision,
    pub report: Option<NspReport>,
    pub sync_ok: bool,
    /// Digital cancellation level of the frame (full duplex only).
    pub delta_frame_db: Option<f64>,
    /// Received linear SI power relative to the transmit power.
    pub analog_db: Option<f64>,
    pub ber: Option<f64>,
    /// Payload bits in resource blocks decoded without error.
    pub good_bits: usize,
    pub sent_bits: usize,
}

impl DirectionOutcome {
    pub fn frame_ok(&self) -> bool {
        self.ber == Some(0.0)
    }
}

/// Timing reference of one received stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArrivalTruth {
    pub tau_desired: usize,
    pub tau_self: usize,
}

#[derive(Debug, Clone)]
struct NodeTx {
    grid: ResourceGrid,
    payload: Vec<Vec<u8>>,
    streams: Vec<Vec<Cplx>>,
    scale: f64,
}

/// Trial engine for one duplex mode and transmit power.
#[derive(Debug, Clone)]
pub struct Link {
    params: SystemParams,
    mode: DuplexMode,
    ofdm: Ofdm,
    cells: Vec<(usize, usize)>,
    block_of_cell: Vec<usize>,
    n_blocks: usize,
    pilots: Vec<(usize, usize)>,
    sync: [Synchronizer; 2],
    pa: PaModel,
    lna: PaModel,
    guard: usize,
}

fn role_index(role: NodeRole) -> usize {
    match role {
        NodeRole::A => 0,
        NodeRole::B => 1,
    }
}

/// Both timing estimates within an eighth of the cyclic prefix of the truth.
pub fn sync_ok(params: &SystemParams, d: &SyncDecision, truth: ArrivalTruth) -> bool {
    let tol = params.cp_len / 8;
    let near = |t: Option<usize>, want: usize| t.is_some_and(|t| t.abs_diff(want) <= tol);
    near(d.tau_desired, truth.tau_desired) && near(d.tau_self, truth.tau_self)
}

/// Sub-seeds of a trial: payload, channel A, channel B, noise A, noise B.
fn split_seed(seed: u64) -> [u64; 5] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [rng.gen(), rng.gen(), rng.gen(), rng.gen(), rng.gen()]
}

impl Link {
    /// `params` supplies the numerology and impairments; antenna counts are
    /// taken from `mode` and the transmit power from `p_t_dbm`.
    pub fn new(params: &SystemParams, mode: DuplexMode, p_t_dbm: f64) -> Result<Self> {
        let mut params = mode.params(params);
        params.tx_power_dbm = p_t_dbm;
        params.validate()?;
        let cells = data_cells(&params, mode);
        let mut block_ids = std::collections::BTreeMap::new();
        let block_of_cell = cells
            .iter()
            .map(|&(s, u)| {
                let next = block_ids.len();
                *block_ids.entry((s, u / RB_SUBCARRIERS)).or_insert(next)
            })
            .collect();
        let mut pilots: Vec<(usize, usize)> = pilot_cells(&params, mode).into_iter().flatten().collect();
        pilots.sort_unstable();
        let root = |r: NodeRole| r.pss_root(&params);
        let sync = [
            Synchronizer::new(&params, root(NodeRole::B), root(NodeRole::A))?,
            Synchronizer::new(&params, root(NodeRole::A), root(NodeRole::B))?,
        ];
        Ok(Self {
            ofdm: Ofdm::new(&params),
            n_blocks: block_ids.len(),
            cells,
            block_of_cell,
            pilots,
            sync,
            pa: PaModel::transmitter(&params),
            lna: PaModel::receiver(&params),
            guard: params.symbol_len(),
            mode,
            params,
        })
    }

    pub fn params(&self) -> &SystemParams {
        &self.params
    }

    pub fn mode(&self) -> DuplexMode {
        self.mode
    }

    /// Payload bits a node sends per frame.
    pub fn frame_bits(&self) -> usize {
        data_capacity(&self.params, self.mode) * self.mode.antennas()
    }

    /// Offset of the current frame inside every simulated stream.
    pub fn guard(&self) -> usize {
        self.guard
    }

    fn stream_len(&self) -> usize {
        self.params.frame_len() + 2 * self.guard
    }

    /// Per-sample amplitude scale giving each port `P_T / ports`.
    fn tx_scale(&self, role: NodeRole) -> f64 {
        let ports = self.mode.node_ports(role).len() as f64;
        let p_port = dbm_to_mw(self.params.tx_power_dbm) / ports;
        (p_port * self.params.fft_size as f64 / self.params.n_data_subcarriers as f64).sqrt()
    }

    fn node_tx(&self, role: NodeRole, rng: &mut impl Rng, symbols: Option<usize>) -> Result<NodeTx> {
        let ports = self.mode.node_ports(role).len();
        let capacity = data_capacity(&self.params, self.mode);
        let payload: Vec<Vec<u8>> =
            (0..ports).map(|_| (0..capacity).map(|_| rng.gen_range(0..2u8)).collect()).collect();
        let grid = build_frame(&self.params, &payload, self.mode, role)?;
        let total = self.params.symbols_per_frame();
        let scale = self.tx_scale(role);
        let prev = self.ofdm.modulate_range(&grid.cells, total - 1..total)?;
        let body = match symbols {
            Some(n) => self.ofdm.modulate_range(&grid.cells, 0..n.min(total))?,
            None => self.ofdm.modulate(&grid.cells)?,
        };
        let streams = prev
            .into_iter()
            .zip(body)
            .map(|(mut s, b)| {
                let head = self.guard.min(b.len());
                let next: Vec<Cplx> = if symbols.is_none() { b[..head].to_vec() } else { Vec::new() };
                s.extend(b);
                s.extend(next);
                s.iter_mut().for_each(|x| *x *= scale);
                if self.params.pa_enabled {
                    self.pa.apply_in_place(&mut s);
                }
                s
            })
            .collect();
        Ok(NodeTx { grid, payload, streams, scale })
    }

    fn truth(&self, ch: &ChannelRealization) -> ArrivalTruth {
        let base = self.guard + self.params.pss_offset();
        ArrivalTruth { tau_desired: base + ch.delay_desired, tau_self: base + ch.delay_self }
    }

    /// Channel of the direction received at `receiver`.
    pub fn channel(&self, lq_db: f64, profile: Profile, seed: u64, receiver: NodeRole) -> ChannelRealization {
        let sub = split_seed(seed);
        let mut ch = realize_channel(&self.params, lq_db, profile, sub[1 + role_index(receiver)]);
        if !self.mode.is_full_duplex() {
            ch.g_taps.iter_mut().flatten().flatten().for_each(|t| *t = ZERO);
        }
        ch
    }

    /// Dual-root scan at node A over the first half-frame only; returns the
    /// report and the true arrival times.
    pub fn sync_trial(&self, lq_db: f64, profile: Profile, seed: u64) -> Result<(NspReport, ArrivalTruth)> {
        let sub = split_seed(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(sub[0]);
        let sync = &self.sync[0];
        let needed = sync.input_len() + self.params.max_delay_offset + self.params.max_self_delay + self.params.pdp_taps;
        let symbols = needed.div_ceil(self.params.symbol_len());
        let tx_a = self.node_tx(NodeRole::A, &mut rng, Some(symbols))?;
        let tx_b = self.node_tx(NodeRole::B, &mut rng, Some(symbols))?;
        let ch = self.channel(lq_db, profile, seed, NodeRole::A);
        let own: &[Vec<Cplx>] = if self.mode.is_full_duplex() { &tx_a.streams } else { &[] };
        let ch_first = first_antenna(&ch);
        let own_first: Vec<&[Cplx]> = own.iter().map(|s| s.as_slice()).collect();
        let parts = propagate_partial(&own_first, &tx_b.streams, &ch_first)?;
        let mut rx = parts;
        let mut noise_rng = ChaCha8Rng::seed_from_u64(sub[3]);
        add_awgn(&mut rx, self.params.noise_var(), &mut noise_rng);
        if self.params.lna_enabled {
            self.lna.apply_in_place(&mut rx);
        }
        Ok((sync.scan(&rx)?, self.truth(&ch)))
    }

    /// Receives one frame in each simulated direction.
    pub fn run_trial(
        &self,
        lq_db: f64,
        profile: Profile,
        opts: TrialOptions,
        seed: u64,
    ) -> Result<Vec<DirectionOutcome>> {
        let sub = split_seed(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(sub[0]);
        let fd = self.mode.is_full_duplex();
        let tx_a = if fd { Some(self.node_tx(NodeRole::A, &mut rng, None)?) } else { None };
        let tx_b = self.node_tx(NodeRole::B, &mut rng, None)?;
        let mut out = vec![self.receive(NodeRole::A, tx_a.as_ref(), &tx_b, lq_db, profile, opts, seed)?];
        if fd && opts.both_directions {
            let tx_a = tx_a.as_ref().expect("full duplex transmits at A");
            out.push(self.receive(NodeRole::B, Some(&tx_b), tx_a, lq_db, profile, opts, seed)?);
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn receive(
        &self,
        role: NodeRole,
        own: Option<&NodeTx>,
        partner: &NodeTx,
        lq_db: f64,
        profile: Profile,
        opts: TrialOptions,
        seed: u64,
    ) -> Result<DirectionOutcome> {
        let p = &self.params;
        let sub = split_seed(seed);
        let ch = self.channel(lq_db, profile, seed, role);
        let len = self.stream_len();
        let silent = vec![vec![ZERO; len]; ch.g_taps.first().map_or(0, Vec::len)];
        let own_streams = own.map_or(&silent, |t| &t.streams);
        let parts = propagate_components(own_streams, &partner.streams, &ch)?;

        let mut noise_rng = ChaCha8Rng::seed_from_u64(sub[3 + role_index(role)]);
        let mut rx = Vec::with_capacity(parts.desired.len());
        let mut true_si = Vec::with_capacity(parts.desired.len());
        let mut si_power = 0.0;
        for (d, s) in parts.desired.iter().zip(&parts.self_interference) {
            let mut z = vec![ZERO; len];
            if opts.noise {
                add_awgn(&mut z, p.noise_var(), &mut noise_rng);
            }
            let mut y: Vec<Cplx> = d.iter().zip(s).zip(&z).map(|((a, b), c)| a + b + c).collect();
            if p.lna_enabled {
                self.lna.apply_in_place(&mut y);
            }
            si_power += s.iter().map(|x| x.norm_sqr()).sum::<f64>() / len as f64;
            true_si.push(y.iter().zip(d).zip(&z).map(|((y, d), z)| y - d - z).collect::<Vec<_>>());
            rx.push(y);
        }
        let analog_db = own.map(|_| lin_to_db(si_power / parts.desired.len() as f64 / dbm_to_mw(p.tx_power_dbm)));

        let truth = self.truth(&ch);
        let (decision, report) = match opts.timing {
            Timing::Genie => (
                SyncDecision {
                    tau_desired: Some(truth.tau_desired),
                    tau_self: Some(truth.tau_self),
                    case_taken: SyncCase::BothPass,
                },
                None,
            ),
            Timing::Estimated(strategy) => {
                let report = self.sync[role_index(role)].scan(&rx[0])?;
                (strategy.decide(&report, p.nsp_threshold), Some(report))
            }
        };
        let sent_bits = self.frame_bits();
        let mut outcome = DirectionOutcome {
            receiver: role,
            decision,
            report,
            sync_ok: sync_ok(p, &decision, truth),
            delta_frame_db: None,
            analog_db,
            ber: None,
            good_bits: 0,
            sent_bits,
        };
        let (Some(tau_d), Some(tau_s)) = (decision.tau_desired, decision.tau_self) else {
            return Ok(outcome);
        };

        let offset = p.pss_offset() as i64;
        let fs_d = tau_d as i64 - offset;
        let fs_s = tau_s as i64 - offset;
        let earliest = if own.is_some() { fs_d.min(fs_s) } else { fs_d };
        let w = (earliest - p.fft_backoff as i64).clamp(0, (len - p.frame_len()) as i64);
        let advance =
            WindowAdvance { desired: (fs_d - w) as f64, self_interference: (fs_s - w) as f64 };
        let w = w as usize;

        let y = self.ofdm.demodulate(&rx, w)?;
        let est = match opts.csi {
            Csi::Estimated => estimate_channels(&y, p, self.mode, role, advance)?,
            Csi::Genie => self.genie_estimate(&ch, w, partner.scale, own.map_or(0.0, |t| t.scale)),
        };
        let cancelled = match own {
            Some(tx) => {
                let rebuilt = rebuild_si(&est.g_hat, &tx.grid.cells)?;
                let si_lattice = self.ofdm.demodulate(&true_si, w)?;
                outcome.delta_frame_db = Some(cancellation_metric(&si_lattice, &rebuilt)?.delta_frame_db);
                subtract(&y, &rebuilt)?
            }
            None => y,
        };
        let zf = zf_matrix(&est.h_hat)?;
        let det = detect(&cancelled, &zf, &self.cells)?;
        outcome.ber = Some(det.ber(&partner.payload)?);
        outcome.good_bits = self.good_bits(&det.bits, &det.erased, &partner.payload);
        Ok(outcome)
    }

    /// True channel responses seen through an FFT window opened at `w`,
    /// in the units of LS estimates on unit pilots.
    fn genie_estimate(&self, ch: &ChannelRealization, w: usize, scale_d: f64, scale_s: f64) -> ChannelEstimate {
        let advance = self.guard as f64 - w as f64;
        let mut h_hat = ChannelMatrices::from_taps(&ch.h_taps, ch.delay_desired, advance, &self.params);
        let mut g_hat = ChannelMatrices::from_taps(&ch.g_taps, ch.delay_self, advance, &self.params);
        h_hat.data.iter_mut().for_each(|v| *v *= scale_d);
        g_hat.data.iter_mut().for_each(|v| *v *= scale_s);
        ChannelEstimate { h_hat, g_hat, est_noise_var: 0.0 }
    }

    fn good_bits(&self, bits: &[Vec<u8>], erased: &[Vec<bool>], truth: &[Vec<u8>]) -> usize {
        let mut good = 0;
        for ((b, e), t) in bits.iter().zip(erased).zip(truth) {
            let mut failed = vec![false; self.n_blocks];
            let mut size = vec![0usize; self.n_blocks];
            for (c, &blk) in self.block_of_cell.iter().enumerate() {
                size[blk] += 2;
                for k in 2 * c..2 * c + 2 {
                    if e[k] || b[k] != t[k] {
                        failed[blk] = true;
                    }
                }
            }
            good += size.iter().zip(&failed).filter(|(_, &f)| !f).map(|(s, _)| s).sum::<usize>();
        }
        good
    }

    /// Noise-free part of a reliability trial at node A with genie timing.
    pub fn prepare_reliability(&self, profile: Profile, seed: u64) -> Result<ReliabilityTrial> {
        let sub = split_seed(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(sub[0]);
        let fd = self.mode.is_full_duplex();
        let tx_a = if fd { Some(self.node_tx(NodeRole::A, &mut rng, None)?) } else { None };
        let tx_b = self.node_tx(NodeRole::B, &mut rng, None)?;
        let ch = self.channel(0.0, profile, seed, NodeRole::A);
        let len = self.stream_len();
        let silent = vec![vec![ZERO; len]; ch.g_taps.first().map_or(0, Vec::len)];
        let own_streams = tx_a.as_ref().map_or(&silent, |t| &t.streams);
        let parts = propagate_components(own_streams, &tx_b.streams, &ch)?;
        let truth = self.truth(&ch);
        let offset = self.params.pss_offset() as i64;
        let fs_d = truth.tau_desired as i64 - offset;
        let fs_s = truth.tau_self as i64 - offset;
        let earliest = if fd { fs_d.min(fs_s) } else { fs_d };
        let w = (earliest - self.params.fft_backoff as i64).max(0);
        Ok(ReliabilityTrial {
            desired_unit: parts.desired,
            self_interference: parts.self_interference,
            own_cells: tx_a.map(|t| t.grid.cells),
            payload: tx_b.payload,
            window: w as usize,
            advance: WindowAdvance { desired: (fs_d - w) as f64, self_interference: (fs_s - w) as f64 },
            noise_seed: sub[3],
        })
    }

    /// Frame-error probability at `lq_db` of a prepared trial, conditioned
    /// on the noise realization at the pilots: the data-cell noise is
    /// integrated analytically. With `sample` set, data-cell noise is drawn
    /// instead and the result is 0 or 1.
    pub fn frame_error_probability(
        &self,
        trial: &ReliabilityTrial,
        lq_db: f64,
        sample: Option<&mut ChaCha8Rng>,
    ) -> Result<f64> {
        let p = &self.params;
        let amp = db_to_lin(lq_db).sqrt();
        let mut rx: Vec<Vec<Cplx>> = trial
            .desired_unit
            .iter()
            .zip(&trial.self_interference)
            .map(|(d, s)| d.iter().zip(s).map(|(d, s)| d * amp + s).collect())
            .collect();
        if p.lna_enabled {
            rx.iter_mut().for_each(|y| self.lna.apply_in_place(y));
        }
        let mut y = self.ofdm.demodulate(&rx, trial.window)?;
        let var = p.noise_var();
        let mut pilot_rng = ChaCha8Rng::seed_from_u64(trial.noise_seed);
        let sd = (var / 2.0).sqrt();
        for i in 0..y.ports {
            for &(s, u) in &self.pilots {
                let re: f64 = StandardNormal.sample(&mut pilot_rng);
                let im: f64 = StandardNormal.sample(&mut pilot_rng);
                let k = y.idx(i, s, u);
                y.data[k] += Cplx::new(re * sd, im * sd);
            }
        }
        let est = estimate_channels(&y, p, self.mode, NodeRole::A, trial.advance)?;
        let cancelled = match &trial.own_cells {
            Some(cells) => subtract(&y, &rebuild_si(&est.g_hat, cells)?)?,
            None => y,
        };
        let zf = zf_matrix(&est.h_hat)?;
        if let Some(rng) = sample {
            let mut noisy = cancelled;
            for &(s, u) in &self.cells {
                for i in 0..noisy.ports {
                    let k = noisy.idx(i, s, u);
                    let re: f64 = StandardNormal.sample(rng);
                    let im: f64 = StandardNormal.sample(rng);
                    noisy.data[k] += Cplx::new(re * sd, im * sd);
                }
            }
            let det = detect(&noisy, &zf, &self.cells)?;
            let ok = det.ber(&trial.payload)? == 0.0;
            return Ok(if ok { 0.0 } else { 1.0 });
        }
        Ok(self.analytic_failure(&cancelled, &zf, &trial.payload, var))
    }

    fn analytic_failure(
        &self,
        y: &Lattice,
        zf: &crate::detector::ZfFilters,
        payload: &[Vec<u8>],
        var: f64,
    ) -> f64 {
        let f = &zf.f;
        let mut log_ok = 0.0;
        for (c, &(s, u)) in self.cells.iter().enumerate() {
            if zf.singular[u] {
                return 1.0;
            }
            for (a, bits) in payload.iter().enumerate() {
                let mut x = ZERO;
                let mut gain = 0.0;
                for i in 0..y.ports {
                    let fa = f.get(u, a, i);
                    x += fa * y.get(i, s, u);
                    gain += fa.norm_sqr();
                }
                let sigma = (var * gain / 2.0).sqrt();
                let sign = |b: u8| if b == 0 { 1.0 } else { -1.0 };
                let p0 = q_function(sign(bits[2 * c]) * x.re / sigma);
                let p1 = q_function(sign(bits[2 * c + 1]) * x.im / sigma);
                log_ok += (-p0).ln_1p() + (-p1).ln_1p();
            }
        }
        -log_ok.exp_m1()
    }
}

/// Noise-free received components of one reliability trial, with the
/// desired part at 0 dB link quality.
#[derive(Debug, Clone)]
pub struct ReliabilityTrial {
    desired_unit: Vec<Vec<Cplx>>,
    self_interference: Vec<Vec<Cplx>>,
    own_cells: Option<Lattice>,
    payload: Vec<Vec<u8>>,
    window: usize,
    advance: WindowAdvance,
    noise_seed: u64,
}

fn first_antenna(ch: &ChannelRealization) -> ChannelRealization {
    ChannelRealization {
        h_taps: ch.h_taps[..1].to_vec(),
        g_taps: ch.g_taps[..1].to_vec(),
        ..ch.clone()
    }
}

/// Desired plus SI at the single Rx antenna of `ch`.
fn propagate_partial(own: &[&[Cplx]], partner: &[Vec<Cplx>], ch: &ChannelRealization) -> Result<Vec<Cplx>> {
    let len = partner.first().map_or(0, Vec::len);
    let silent = vec![vec![ZERO; len]; ch.g_taps[0].len()];
    let own: Vec<&[Cplx]> = if own.is_empty() { silent.iter().map(|s| s.as_slice()).collect() } else { own.to_vec() };
    let partner: Vec<&[Cplx]> = partner.iter().map(|s| s.as_slice()).collect();
    let parts = propagate_components(&own, &partner, ch)?;
    let mut y = parts.desired.into_iter().next().ok_or_else(|| Error::Shape("no Rx antenna".into()))?;
    for (a, b) in y.iter_mut().zip(&parts.self_interference[0]) {
        *a += b;
    }
    Ok(y)
}
