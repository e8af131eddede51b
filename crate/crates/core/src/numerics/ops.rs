//! Forward kernels shared by the autodiff tape and the cache-based inference
//! path, so both compute bit-identical values.

use super::mask::BinaryMask;
use super::tensor::{kernels, Real};

/// Additive constant applied to excluded scores before normalizing.
pub const MASK_NEG: f64 = -1e9;

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::c(GELU_C);
    let a = T::c(GELU_A);
    let half = T::c(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::c(GELU_C);
    let a = T::c(GELU_A);
    let half = T::c(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::c(3.0) * a * x * x)
}

/// Row-wise layer norm. `xhat` and `rstd` receive the normalized input and
/// reciprocal standard deviation per row for the backward pass.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_rows<T: Real>(
    x: &[T],
    cols: usize,
    gain: &[T],
    bias: &[T],
    eps: f64,
    out: &mut [T],
    xhat: &mut [T],
    rstd: &mut [T],
) {
    let n = T::c(cols as f64);
    for (r, row) in x.chunks_exact(cols).enumerate() {
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
        let rs = T::one() / (var + T::c(eps)).sqrt();
        rstd[r] = rs;
        let o = &mut out[r * cols..(r + 1) * cols];
        let xh = &mut xhat[r * cols..(r + 1) * cols];
        for j in 0..cols {
            let h = (row[j] - mean) * rs;
            xh[j] = h;
            o[j] = h * gain[j] + bias[j];
        }
    }
}

/// Softmax over the allowed entries of one row. Excluded entries receive the
/// additive [`MASK_NEG`] and come out as exactly zero.
#[inline]
pub fn masked_softmax_row<T: Real>(scores: &[T], allowed: &[bool], out: &mut [T]) {
    let neg = T::c(MASK_NEG);
    let mut max = T::neg_infinity();
    for (j, &s) in scores.iter().enumerate() {
        let v = if allowed[j] { s } else { s + neg };
        out[j] = v;
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for o in out.iter_mut() {
        let e = (*o - max).exp();
        *o = e;
        sum += e;
    }
    let inv = T::one() / sum;
    for (o, &a) in out.iter_mut().zip(allowed) {
        // exp(-1e9) underflows to zero already; pin it regardless of
        // rounding in the additive step.
        *o = if a { *o * inv } else { T::zero() };
    }
}

/// Scaled dot-product attention over `heads` column blocks.
///
/// `q` is `[m, d]`, `k` and `v` are `[n, d]`, `mask` is `[m, n]`. Writes the
/// concatenated head outputs to `out` (`[m, d]`) and the attention weights to
/// `probs` (`[heads, m, n]`). `keep`, when present, is a per-weight dropout
/// multiplier (0 or 1/(1-p)) applied after normalizing.
#[allow(clippy::too_many_arguments)]
pub fn attention_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    m: usize,
    n: usize,
    d: usize,
    heads: usize,
    mask: &BinaryMask,
    keep: Option<&[T]>,
    out: &mut [T],
    probs: &mut [T],
) {
    let hd = d / heads;
    let scale = T::c(1.0 / (hd as f64).sqrt());
    let mut scores = vec![T::zero(); n];
    for h in 0..heads {
        let c0 = h * hd;
        for i in 0..m {
            let qi = &q[i * d + c0..i * d + c0 + hd];
            let allowed = mask.row(i);
            for j in 0..n {
                scores[j] = if allowed[j] {
                    kernels::dot(qi, &k[j * d + c0..j * d + c0 + hd]) * scale
                } else {
                    T::zero()
                };
            }
            let p = &mut probs[(h * m + i) * n..(h * m + i + 1) * n];
            masked_softmax_row(&scores, allowed, p);
            let o = &mut out[i * d + c0..i * d + c0 + hd];
            for j in 0..n {
                let mut w = p[j];
                if let Some(keep) = keep {
                    w *= keep[(h * m + i) * n + j];
                }
                if w == T::zero() {
                    continue;
                }
                let vj = &v[j * d + c0..j * d + c0 + hd];
                for (oo, &vv) in o.iter_mut().zip(vj) {
                    *oo += w * vv;
                }
            }
        }
    }
}
