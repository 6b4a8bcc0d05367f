//! FFT plans and small signal-processing helpers shared by the modules.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

pub type Cplx = Complex64;

/// Forward and inverse plans of one size.
#[derive(Clone)]
pub struct FftPair {
    pub len: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FftPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FftPair").field("len", &self.len).finish()
    }
}

impl FftPair {
    pub fn new(len: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self { len, fwd: planner.plan_fft_forward(len), inv: planner.plan_fft_inverse(len) }
    }

    /// Unnormalized forward transform in place.
    pub fn forward(&self, buf: &mut [Cplx]) {
        self.fwd.process(buf);
    }

    /// Unnormalized inverse transform in place.
    pub fn inverse(&self, buf: &mut [Cplx]) {
        self.inv.process(buf);
    }
}

/// Linear convolution of `x` with `h` truncated to `x.len()` samples,
/// `y[n] = sum_l h[l] x[n-l]`.
pub fn convolve_truncated(x: &[Cplx], h: &[Cplx], out: &mut [Cplx]) {
    debug_assert_eq!(x.len(), out.len());
    for (l, &tap) in h.iter().enumerate() {
        if tap == Cplx::new(0.0, 0.0) || l >= x.len() {
            continue;
        }
        for (o, &s) in out[l..].iter_mut().zip(x.iter()) {
            *o += tap * s;
        }
    }
}

/// FFT-based linear convolution, full length `x.len() + h.len() - 1`.
pub fn fft_convolve(x: &[Cplx], h: &[Cplx]) -> Vec<Cplx> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    let out_len = x.len() + h.len() - 1;
    let n = fast_fft_len(out_len);
    let plan = FftPair::new(n);
    let mut a = vec![Cplx::new(0.0, 0.0); n];
    let mut b = vec![Cplx::new(0.0, 0.0); n];
    a[..x.len()].copy_from_slice(x);
    b[..h.len()].copy_from_slice(h);
    plan.forward(&mut a);
    plan.forward(&mut b);
    let scale = 1.0 / n as f64;
    for (u, v) in a.iter_mut().zip(&b) {
        *u = *u * v * scale;
    }
    plan.inverse(&mut a);
    a.truncate(out_len);
    a
}

/// Smallest length `>= n` with no prime factor above 5.
pub fn fast_fft_len(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for f in [2, 3, 5] {
            while r % f == 0 {
                r /= f;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

pub fn mean_power(x: &[Cplx]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|s| s.norm_sqr()).sum::<f64>() / x.len() as f64
}

/// Gaussian tail probability.
pub fn q_function(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(x / std::f64::consts::SQRT_2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_lengths() {
        assert_eq!(fast_fft_len(1), 1);
        assert_eq!(fast_fft_len(7), 8);
        assert_eq!(fast_fft_len(157_888), 160_000);
        assert_eq!(fast_fft_len(2048), 2048);
    }

    #[test]
    fn fft_convolution_matches_direct() {
        let x: Vec<Cplx> = (0..37).map(|i| Cplx::new(i as f64, -(i as f64) * 0.5)).collect();
        let h = vec![Cplx::new(1.0, 0.5), Cplx::new(-0.25, 0.0), Cplx::new(0.0, 2.0)];
        let full = fft_convolve(&x, &h);
        let mut direct = vec![Cplx::new(0.0, 0.0); x.len()];
        convolve_truncated(&x, &h, &mut direct);
        for (a, b) in direct.iter().zip(&full) {
            assert!((a - b).norm() < 1e-9);
        }
        assert_eq!(full.len(), 39);
    }

    #[test]
    fn q_function_reference_points() {
        assert!((q_function(0.0) - 0.5).abs() < 1e-15);
        for (x, q) in [(1.0, 0.158_655_253_931_457_07), (5.0, 2.866_515_718_791_933e-7), (7.0, 1.279_812_543_885_835e-12)] {
            assert!((q_function(x) / q - 1.0).abs() < 1e-9);
        }
    }
}
