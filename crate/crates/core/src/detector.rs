//! Zero-forcing detection of the desired streams and bit-error counting.

use crate::canceler::ChannelMatrices;
use crate::dsp::Cplx;
use crate::error::{Error, Result};
use crate::grid::{qpsk_demap, Lattice};

const ZERO: Cplx = Cplx::new(0.0, 0.0);
/// Relative determinant below which a channel matrix counts as singular.
pub const SINGULAR_TOL: f64 = 1e-9;

/// Determinant of an `n x n` row-major matrix by elimination with partial
/// pivoting; `a` is overwritten with the inverse when it exists.
fn invert_in_place(a: &mut [Cplx], n: usize) -> Cplx {
    let mut inv = vec![ZERO; n * n];
    for i in 0..n {
        inv[i * n + i] = Cplx::new(1.0, 0.0);
    }
    let mut det = Cplx::new(1.0, 0.0);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a[x * n + col].norm().total_cmp(&a[y * n + col].norm()))
            .unwrap_or(col);
        if a[pivot * n + col] == ZERO {
            return ZERO;
        }
        if pivot != col {
            for c in 0..n {
                a.swap(pivot * n + c, col * n + c);
                inv.swap(pivot * n + c, col * n + c);
            }
            det = -det;
        }
        let p = a[col * n + col];
        det *= p;
        for c in 0..n {
            a[col * n + c] /= p;
            inv[col * n + c] /= p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[r * n + col];
            if f == ZERO {
                continue;
            }
            for c in 0..n {
                let (ac, ic) = (a[col * n + c], inv[col * n + c]);
                a[r * n + c] -= f * ac;
                inv[r * n + c] -= f * ic;
            }
        }
    }
    a.copy_from_slice(&inv);
    det
}

/// Per-subcarrier ZF filters `F = (H^H H)^-1 H^H` (stored `n_tx x n_rx`).
#[derive(Debug, Clone, PartialEq)]
pub struct ZfFilters {
    pub f: ChannelMatrices,
    pub singular: Vec<bool>,
    /// Smallest `|det H| / ||H||_F^n` over the non-singular subcarriers.
    pub condition_floor: f64,
}

pub fn zf_matrix(h: &ChannelMatrices) -> Result<ZfFilters> {
    let (n_rx, n_tx) = (h.n_rx, h.n_tx);
    if n_tx == 0 || n_rx < n_tx {
        return Err(Error::Shape(format!("{n_rx}x{n_tx} channel has no left inverse")));
    }
    let mut f = ChannelMatrices::zeros(n_tx, n_rx, h.n_sc);
    let mut singular = vec![false; h.n_sc];
    let mut condition_floor = f64::INFINITY;
    let mut gram = vec![ZERO; n_tx * n_tx];
    for u in 0..h.n_sc {
        let m = h.at(u);
        let frob2: f64 = m.iter().map(|x| x.norm_sqr()).sum();
        for a in 0..n_tx {
            for b in 0..n_tx {
                gram[a * n_tx + b] = (0..n_rx).map(|i| m[i * n_tx + a].conj() * m[i * n_tx + b]).sum();
            }
        }
        let det = invert_in_place(&mut gram, n_tx);
        // |det(H^H H)|^(1/2) generalizes |det H| to tall matrices
        let rel = det.norm().sqrt() / frob2.powf(n_tx as f64 / 2.0);
        if !(rel >= SINGULAR_TOL) {
            singular[u] = true;
            continue;
        }
        condition_floor = condition_floor.min(rel);
        for a in 0..n_tx {
            for i in 0..n_rx {
                let v: Cplx = (0..n_tx).map(|b| gram[a * n_tx + b] * m[i * n_tx + b].conj()).sum();
                f.set(u, a, i, v);
            }
        }
    }
    Ok(ZfFilters { f, singular, condition_floor })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    /// Equalized symbols per stream, in the order of `cells`.
    pub x_hat: Vec<Vec<Cplx>>,
    /// Hard decisions per stream, two per cell.
    pub bits: Vec<Vec<u8>>,
    /// Bits on singular subcarriers, carrying no decision.
    pub erased: Vec<Vec<bool>>,
    pub condition_floor: f64,
}

impl DetectionResult {
    /// Bit error ratio against the payload, with erasures counted as half
    /// an error.
    pub fn ber(&self, truth: &[Vec<u8>]) -> Result<f64> {
        if truth.len() != self.bits.len() {
            return Err(Error::Shape("stream count differs from the payload".into()));
        }
        let mut errors = 0.0;
        let mut total = 0usize;
        for ((b, e), t) in self.bits.iter().zip(&self.erased).zip(truth) {
            if b.len() != t.len() {
                return Err(Error::Shape(format!("{} decoded bits for {} sent", b.len(), t.len())));
            }
            for ((&x, &er), &y) in b.iter().zip(e).zip(t) {
                errors += if er { 0.5 } else { (x != y) as u8 as f64 };
            }
            total += t.len();
        }
        Ok(if total == 0 { 0.0 } else { errors / total as f64 })
    }
}

/// `x_hat[s,u] = F[u] y[s,u]` on the listed data cells, then QPSK decisions.
pub fn detect(
    cancelled: &Lattice,
    filters: &ZfFilters,
    cells: &[(usize, usize)],
) -> Result<DetectionResult> {
    let f = &filters.f;
    if cancelled.ports != f.n_tx || cancelled.subcarriers != f.n_sc {
        return Err(Error::Shape(format!(
            "{} Rx ports x {} subcarriers against {}x{} filters",
            cancelled.ports, cancelled.subcarriers, f.n_tx, f.n_sc
        )));
    }
    let streams = f.n_rx;
    let mut x_hat = vec![Vec::with_capacity(cells.len()); streams];
    let mut bits = vec![Vec::with_capacity(2 * cells.len()); streams];
    let mut erased = vec![Vec::with_capacity(2 * cells.len()); streams];
    for &(s, u) in cells {
        let bad = filters.singular[u];
        for a in 0..streams {
            let x: Cplx = (0..cancelled.ports).map(|i| f.get(u, a, i) * cancelled.get(i, s, u)).sum();
            let [b0, b1] = qpsk_demap(x);
            x_hat[a].push(x);
            bits[a].extend([b0, b1]);
            erased[a].extend([bad, bad]);
        }
    }
    Ok(DetectionResult { x_hat, bits, erased, condition_floor: filters.condition_floor })
}

/// Fraction of positions where the sequences differ.
pub fn count_errors(bits: &[u8], truth: &[u8]) -> Result<f64> {
    if bits.len() != truth.len() {
        return Err(Error::Shape(format!("{} bits against {} reference bits", bits.len(), truth.len())));
    }
    if bits.is_empty() {
        return Ok(0.0);
    }
    let wrong = bits.iter().zip(truth).filter(|(a, b)| a != b).count();
    Ok(wrong as f64 / bits.len() as f64)
}
