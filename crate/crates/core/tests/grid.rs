use std::f64::consts::PI;

use fdx_core::dsp::Cplx;
use fdx_core::grid::*;
use fdx_core::SystemParams;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> SystemParams {
    SystemParams {
        sample_rate: 1.92e6,
        fft_size: 128,
        cp_len: 32,
        n_data_subcarriers: 72,
        slots_per_frame: 4,
        fft_backoff: 8,
        max_delay_offset: 8,
        ..Default::default()
    }
}

fn random_grid(p: &SystemParams, ports: usize, rng: &mut impl Rng) -> ResourceGrid {
    let mut cells = Lattice::for_params(p, ports);
    for v in cells.data.iter_mut() {
        *v = Cplx::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    }
    let occupancy = vec![CellKind::Data; cells.data.len()];
    ResourceGrid { cells, occupancy, mode: DuplexMode::FdMimo, role: NodeRole::A }
}

fn rel_error(a: &Lattice, b: &Lattice) -> f64 {
    let err: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).norm_sqr()).sum();
    (err / b.energy()).sqrt()
}

#[test]
fn qpsk_unit_power() {
    let a = std::f64::consts::FRAC_1_SQRT_2;
    assert_eq!(qpsk_modulate(&[0, 0]).unwrap(), vec![Cplx::new(a, a)]);
    assert_eq!(qpsk_modulate(&[1, 1]).unwrap(), vec![Cplx::new(-a, -a)]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let bits: Vec<u8> = (0..1000).map(|_| rng.gen_range(0..2)).collect();
    let syms = qpsk_modulate(&bits).unwrap();
    let mean = syms.iter().map(|s| s.norm_sqr()).sum::<f64>() / syms.len() as f64;
    assert!((mean - 1.0).abs() < 1e-12);
    for s in &syms {
        let [b0, b1] = qpsk_demap(*s);
        assert_eq!(qpsk_point(b0, b1), *s);
    }
}

#[test]
fn capacity_matches_cell_count() {
    // per slot: symbols 0 and 3 carry pilots every 6th subcarrier per port
    // (ports 0, 1), symbol 1 carries ports 2, 3; PSS is 62 cells twice a frame
    let p = SystemParams::default();
    for (mode, per_slot) in [(DuplexMode::HdSiso, 2 * 200), (DuplexMode::FdSiso, 2 * 400), (DuplexMode::FdMimo, 3 * 400)] {
        let mp = mode.params(&p);
        let free = 120 * 1200 - 20 * per_slot - 2 * 62;
        assert_eq!(data_capacity(&mp, mode), 2 * free, "{mode}");
        assert_eq!(data_cells(&mp, mode).len(), free);
    }
}

#[test]
fn node_grids_share_positions_but_not_pss_values() {
    let p = SystemParams::default();
    let mode = DuplexMode::FdMimo;
    let cap = data_capacity(&p, mode);
    let payload = vec![vec![0u8; cap]; 2];
    let a = build_frame(&p, &payload, mode, NodeRole::A).unwrap();
    let b = build_frame(&p, &payload, mode, NodeRole::B).unwrap();
    let mut pss_cells = 0;
    let mut differing = 0;
    for s in 0..p.symbols_per_frame() {
        for u in 0..p.n_data_subcarriers {
            let pss = a.kind(0, s, u) == CellKind::Pss;
            assert_eq!(pss, b.kind(0, s, u) == CellKind::Pss);
            if pss {
                pss_cells += 1;
                differing += (a.cells.get(0, s, u) != b.cells.get(0, s, u)) as usize;
            }
        }
    }
    assert_eq!(pss_cells, 2 * 62);
    assert!(differing > pss_cells / 2);
}

#[test]
fn payload_length_is_checked() {
    let p = SystemParams::default();
    let cap = data_capacity(&p, DuplexMode::HdSiso);
    assert!(build_frame(&p, &[vec![0; cap - 2]], DuplexMode::HdSiso, NodeRole::A).is_err());
    assert!(build_frame(&p, &[vec![]], DuplexMode::HdSiso, NodeRole::A).is_err());
    assert!(build_frame(&p, &[vec![0; cap], vec![0; cap]], DuplexMode::HdSiso, NodeRole::A).is_err());
}

#[test]
fn null_grid_gives_silence() {
    let p = small();
    let cells = Lattice::for_params(&p, 2);
    let occupancy = vec![CellKind::Null; cells.data.len()];
    let g = ResourceGrid { cells, occupancy, mode: DuplexMode::FdMimo, role: NodeRole::A };
    let streams = ofdm_modulate(&g, &p).unwrap();
    assert!(streams.iter().all(|s| s.samples.iter().all(|x| *x == Cplx::new(0.0, 0.0))));
    assert_eq!(streams[0].samples.len(), p.frame_len());
}

#[test]
fn single_subcarrier_is_a_tone_with_cp() {
    let p = small();
    let n = p.fft_size;
    let mut cells = Lattice::for_params(&p, 1);
    let u = 40;
    let k = subcarrier_freq(u, p.n_data_subcarriers);
    cells.set(0, 0, u, Cplx::new(1.0, 0.0));
    let occupancy = vec![CellKind::Null; cells.data.len()];
    let g = ResourceGrid { cells, occupancy, mode: DuplexMode::HdSiso, role: NodeRole::A };
    let x = &ofdm_modulate(&g, &p).unwrap()[0].samples;
    let scale = 1.0 / (n as f64).sqrt();
    for t in 0..n {
        let want = Cplx::from_polar(scale, 2.0 * PI * k as f64 * t as f64 / n as f64);
        assert!((x[p.cp_len + t] - want).norm() < 1e-12);
    }
    for t in 0..p.cp_len {
        assert!((x[t] - x[n + t]).norm() < 1e-15);
    }
}

#[test]
fn window_delay_inside_cp_is_a_phase_ramp() {
    let p = small();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let g = random_grid(&p, 1, &mut rng);
    let tx = ofdm_modulate(&g, &p).unwrap();
    // the window opens d samples early: prepend d samples of silence
    let d = 5usize;
    let mut late = vec![Cplx::new(0.0, 0.0); d];
    late.extend_from_slice(&tx[0].samples);
    let shifted = vec![SampleStream::new(late, &p)];
    let back = ofdm_demodulate(&shifted, 0, &p).unwrap();
    let n = p.fft_size as f64;
    for s in 1..p.symbols_per_frame() {
        for u in 0..p.n_data_subcarriers {
            let k = subcarrier_freq(u, p.n_data_subcarriers) as f64;
            let ramp = Cplx::from_polar(1.0, -2.0 * PI * k * d as f64 / n);
            assert!((back.get(0, s, u) - g.cells.get(0, s, u) * ramp).norm() < 1e-10);
        }
    }
}

#[test]
fn window_past_cp_adds_isi() {
    let p = small();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let g = random_grid(&p, 1, &mut rng);
    let mut tx = ofdm_modulate(&g, &p).unwrap();
    tx[0].samples.extend(vec![Cplx::new(0.0, 0.0); p.cp_len]);
    let back = ofdm_demodulate(&tx, p.cp_len / 2, &p).unwrap();
    assert!(rel_error(&back, &g.cells) > 1e-3);
}

#[test]
fn demodulate_rejects_short_streams() {
    let p = small();
    let s = vec![SampleStream::new(vec![Cplx::new(0.0, 0.0); p.frame_len() - 1], &p)];
    assert!(ofdm_demodulate(&s, 0, &p).is_err());
}

#[test]
fn crs_ports_never_collide() {
    let p = SystemParams::default();
    for mode in [DuplexMode::FdSiso, DuplexMode::FdMimo] {
        let mp = mode.params(&p);
        let occ: Vec<Vec<CellKind>> = [NodeRole::A, NodeRole::B].map(|r| occupancy(&mp, mode, r)).into_iter().collect();
        let per_port = mp.symbols_per_frame() * mp.n_data_subcarriers;
        for cell in 0..per_port {
            let owners = occ
                .iter()
                .flat_map(|o| o.chunks(per_port).map(move |c| c[cell]))
                .filter(|k| *k == CellKind::Crs)
                .count();
            assert!(owners <= 1, "{mode} cell {cell}");
        }
        assert_eq!(occupancy(&mp, mode, NodeRole::A), occupancy(&mp, mode, NodeRole::A));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn round_trip_is_identity(seed in any::<u64>(), ports in 1usize..=2) {
        let p = small();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_grid(&p, ports, &mut rng);
        let tx = ofdm_modulate(&g, &p).unwrap();
        let back = ofdm_demodulate(&tx, 0, &p).unwrap();
        prop_assert!(rel_error(&back, &g.cells) <= 1e-10);
    }

    #[test]
    fn parseval_per_symbol(seed in any::<u64>(), s in 0usize..24) {
        let p = small();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_grid(&p, 1, &mut rng);
        let x = &ofdm_modulate(&g, &p).unwrap()[0].samples;
        let start = s * p.symbol_len() + p.cp_len;
        let time: f64 = x[start..start + p.fft_size].iter().map(|v| v.norm_sqr()).sum::<f64>() / p.fft_size as f64;
        let freq: f64 = g.cells.symbol(0, s).iter().map(|v| v.norm_sqr()).sum::<f64>() / p.fft_size as f64;
        prop_assert!((time - freq).abs() <= 1e-10 * freq.max(1.0));
    }

    #[test]
    fn subcarrier_index_round_trip(u in 0usize..1200) {
        let k = subcarrier_freq(u, 1200);
        prop_assert!(k != 0);
        prop_assert_eq!(subcarrier_of_freq(k, 1200), Some(u));
    }
}
