//! Shared numeric kernels.
//!
//! Both the recording tape (training) and the plain inference path call
//! these same functions, so the two paths cannot drift apart. Kernels that
//! perform matrix products (matmul, affine, convolution, LSTM gate
//! products) report their multiply-accumulate counts to a thread-local
//! tally; elementwise work, normalization and softmax are excluded from
//! the tally by convention.

use std::cell::Cell;

use super::tensor::{sc, Scalar};

// ── MAC tally ────────────────────────────────────────────────────────

thread_local! {
    static MAC_TALLY: Cell<u64> = const { Cell::new(0) };
}

#[inline]
pub(crate) fn mac_add(n: u64) {
    MAC_TALLY.with(|t| t.set(t.get() + n));
}

/// Resets the tally to zero and returns the previous value.
pub fn mac_tally_reset() -> u64 {
    MAC_TALLY.with(|t| {
        let old = t.get();
        t.set(0);
        old
    })
}

pub fn mac_tally_read() -> u64 {
    MAC_TALLY.with(|t| t.get())
}

// ── Matrix products ──────────────────────────────────────────────────

/// C = A·B with A: m×k, B: k×n (row-major).
pub(crate) fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    mac_add((m * k * n) as u64);
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in o_row.iter_mut().zip(b_row.iter()) {
                *o = *o + a_ip * b_pj;
            }
        }
    }
    out
}

pub(crate) fn transpose<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    debug_assert_eq!(x.len(), rows * cols);
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// C = A·Bᵀ with A: m×k, B: n×k (row-major); C: m×n. B is transposed once
/// so the accumulation runs along output rows, which vectorizes without
/// reassociating any reduction.
pub(crate) fn matmul_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let bt = transpose(b, n, k);
    matmul(a, &bt, m, k, n)
}

/// C = Aᵀ·B with A: k×m, B: k×n; C: m×n. Used by backward passes; the
/// tally is charged to the forward kernels only, so this does not count.
pub(crate) fn matmul_tn_untallied<S: Scalar>(
    a: &[S],
    b: &[S],
    k: usize,
    m: usize,
    n: usize,
) -> Vec<S> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![S::zero(); m * n];
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            let o_row = &mut out[i * n..(i + 1) * n];
            for (o, &b_pj) in o_row.iter_mut().zip(b_row.iter()) {
                *o = *o + a_pi * b_pj;
            }
        }
    }
    out
}

pub(crate) fn matmul_untallied<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let before = mac_tally_read();
    let out = matmul(a, b, m, k, n);
    MAC_TALLY.with(|t| t.set(before));
    out
}

pub(crate) fn matmul_nt_untallied<S: Scalar>(
    a: &[S],
    b: &[S],
    m: usize,
    k: usize,
    n: usize,
) -> Vec<S> {
    let before = mac_tally_read();
    let out = matmul_nt(a, b, m, k, n);
    MAC_TALLY.with(|t| t.set(before));
    out
}

/// y = x·Wᵀ + b with x: t×din, W: dout×din, b: dout (broadcast over rows).
pub(crate) fn affine<S: Scalar>(
    x: &[S],
    w: &[S],
    b: Option<&[S]>,
    t: usize,
    din: usize,
    dout: usize,
) -> Vec<S> {
    let mut out = matmul_nt(x, w, t, din, dout);
    if let Some(bias) = b {
        debug_assert_eq!(bias.len(), dout);
        for row in out.chunks_exact_mut(dout) {
            for (o, &bi) in row.iter_mut().zip(bias.iter()) {
                *o = *o + bi;
            }
        }
    }
    out
}

// ── Elementwise ──────────────────────────────────────────────────────

/// tanh via one exponential (library `tanh` costs several times more):
/// tanh(x) = 1 − 2/(1 + e^{2x}). Saturates cleanly at ±1 for large |x|.
#[inline]
pub(crate) fn tanh_fast<S: Scalar>(x: S) -> S {
    let one = S::one();
    let two = one + one;
    if x >= S::zero() {
        one - two / (one + (x + x).exp())
    } else {
        // mirror for negative inputs so e^{2x} never overflows
        let e = (x + x).exp();
        (e - one) / (e + one)
    }
}

/// tanh-form GELU.
#[inline]
pub(crate) fn gelu_val<S: Scalar>(x: S) -> S {
    gelu_val_tanh(x).0
}

/// GELU value together with the inner tanh, for backward caching.
#[inline]
pub(crate) fn gelu_val_tanh<S: Scalar>(x: S) -> (S, S) {
    let c: S = sc(0.7978845608028654); // sqrt(2/pi)
    let a: S = sc(0.044715);
    let half: S = sc(0.5);
    let u = c * (x + a * x * x * x);
    let th = tanh_fast(u);
    (half * x * (S::one() + th), th)
}

/// d/dx of the tanh-form GELU.
#[cfg_attr(not(test), allow(dead_code))]
#[inline]
pub(crate) fn gelu_grad<S: Scalar>(x: S) -> S {
    let c: S = sc(0.7978845608028654);
    let a: S = sc(0.044715);
    let u = c * (x + a * x * x * x);
    gelu_grad_with_tanh(x, tanh_fast(u))
}

/// GELU derivative given the forward pass's tanh(u).
#[inline]
pub(crate) fn gelu_grad_with_tanh<S: Scalar>(x: S, th: S) -> S {
    let c: S = sc(0.7978845608028654);
    let a: S = sc(0.044715);
    let half: S = sc(0.5);
    let three: S = sc(3.0);
    let sech2 = S::one() - th * th;
    half * (S::one() + th) + half * x * sech2 * c * (S::one() + three * a * x * x)
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

// ── Softmax / normalization ──────────────────────────────────────────

/// In-place stable softmax over each row of an rows×cols matrix.
pub(crate) fn softmax_rows_inplace<S: Scalar>(x: &mut [S], rows: usize, cols: usize) {
    debug_assert_eq!(x.len(), rows * cols);
    for row in x.chunks_exact_mut(cols) {
        let mut m = S::neg_infinity();
        for &v in row.iter() {
            if v > m {
                m = v;
            }
        }
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum = sum + *v;
        }
        let inv = S::one() / sum;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
}

/// Stable temperature softmax of one row, computed in f64.
pub(crate) fn row_softmax_f64(logits: &[f64], tau: f64) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| ((l - m) / tau).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= sum;
    }
    out
}

/// Row-wise L2 normalization with a norm floor. Returns (y, norms).
pub(crate) fn normalize_rows<S: Scalar>(
    x: &[S],
    rows: usize,
    cols: usize,
    floor: S,
) -> (Vec<S>, Vec<S>) {
    debug_assert_eq!(x.len(), rows * cols);
    let mut out = vec![S::zero(); rows * cols];
    let mut norms = vec![S::zero(); rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut ss = S::zero();
        for &v in row {
            ss = ss + v * v;
        }
        let n = ss.sqrt().max(floor);
        norms[r] = n;
        let inv = S::one() / n;
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row.iter()) {
            *o = v * inv;
        }
    }
    (out, norms)
}

/// Layer norm over each row with learned gain/bias. Returns
/// (y, per-row mean, per-row reciprocal std).
pub(crate) fn layer_norm_rows<S: Scalar>(
    x: &[S],
    rows: usize,
    cols: usize,
    gain: &[S],
    bias: &[S],
    eps: S,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    debug_assert_eq!(x.len(), rows * cols);
    debug_assert_eq!(gain.len(), cols);
    debug_assert_eq!(bias.len(), cols);
    let inv_n = S::one() / sc::<S>(cols as f64);
    let mut out = vec![S::zero(); rows * cols];
    let mut means = vec![S::zero(); rows];
    let mut rstds = vec![S::zero(); rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut mean = S::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean * inv_n;
        let mut var = S::zero();
        for &v in row {
            let d = v - mean;
            var = var + d * d;
        }
        var = var * inv_n;
        let rstd = S::one() / (var + eps).sqrt();
        means[r] = mean;
        rstds[r] = rstd;
        for ((o, &v), (&g, &b)) in out[r * cols..(r + 1) * cols]
            .iter_mut()
            .zip(row.iter())
            .zip(gain.iter().zip(bias.iter()))
        {
            *o = (v - mean) * rstd * g + b;
        }
    }
    (out, means, rstds)
}

// ── Convolution ──────────────────────────────────────────────────────

/// Output length of a single valid strided convolution.
#[inline]
pub(crate) fn conv_out_len(t_in: usize, k: usize, stride: usize) -> Option<usize> {
    if t_in < k {
        None
    } else {
        Some((t_in - k) / stride + 1)
    }
}

/// Strided valid 1-D convolution. Input x: t_in×c_in (row-major frames),
/// weight w: [c_out][c_in][k], bias b: c_out. Output: t_out×c_out.
pub(crate) fn conv1d<S: Scalar>(
    x: &[S],
    t_in: usize,
    c_in: usize,
    w: &[S],
    b: &[S],
    c_out: usize,
    k: usize,
    stride: usize,
) -> (Vec<S>, usize) {
    let t_out = conv_out_len(t_in, k, stride).expect("conv input shorter than kernel");
    mac_add((t_out * c_out * c_in * k) as u64);
    // Repack weights to [k][c_in][c_out]: the inner loop then accumulates
    // along the output-channel row, which vectorizes.
    let mut wr = vec![S::zero(); k * c_in * c_out];
    for co in 0..c_out {
        for ci in 0..c_in {
            for j in 0..k {
                wr[(j * c_in + ci) * c_out + co] = w[(co * c_in + ci) * k + j];
            }
        }
    }
    let mut out = vec![S::zero(); t_out * c_out];
    for t in 0..t_out {
        let o_row = &mut out[t * c_out..(t + 1) * c_out];
        o_row.copy_from_slice(b);
        for j in 0..k {
            let x_row = &x[(t * stride + j) * c_in..(t * stride + j + 1) * c_in];
            for (ci, &xv) in x_row.iter().enumerate() {
                let w_row = &wr[(j * c_in + ci) * c_out..(j * c_in + ci + 1) * c_out];
                for (o, &wv) in o_row.iter_mut().zip(w_row.iter()) {
                    *o = *o + xv * wv;
                }
            }
        }
    }
    (out, t_out)
}

/// Same-length grouped 1-D convolution with zero padding; kernel must be
/// odd. Input/output: t×c, weight: [c][c/g][k], bias: c.
pub(crate) fn conv1d_same_grouped<S: Scalar>(
    x: &[S],
    t: usize,
    c: usize,
    w: &[S],
    b: &[S],
    k: usize,
    groups: usize,
) -> Vec<S> {
    assert!(k % 2 == 1, "same-padding conv needs an odd kernel");
    assert!(c % groups == 0);
    let cg = c / groups;
    let half = k / 2;
    mac_add((t * c * cg * k) as u64);
    // repack per group to [j][ci][co] so accumulation runs along the
    // group's output channels
    let mut wr = vec![S::zero(); groups * k * cg * cg];
    for g in 0..groups {
        for co in 0..cg {
            for ci in 0..cg {
                for j in 0..k {
                    wr[((g * k + j) * cg + ci) * cg + co] =
                        w[((g * cg + co) * cg + ci) * k + j];
                }
            }
        }
    }
    let mut out = vec![S::zero(); t * c];
    for ti in 0..t {
        for g in 0..groups {
            let co0 = g * cg;
            let o_row = &mut out[ti * c + co0..ti * c + co0 + cg];
            o_row.copy_from_slice(&b[co0..co0 + cg]);
            for j in 0..k {
                let src = ti as isize + j as isize - half as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let x_row = &x[src as usize * c + co0..src as usize * c + co0 + cg];
                for (ci, &xv) in x_row.iter().enumerate() {
                    let w_row = &wr[((g * k + j) * cg + ci) * cg..((g * k + j) * cg + ci + 1) * cg];
                    for (o, &wv) in o_row.iter_mut().zip(w_row.iter()) {
                        *o = *o + xv * wv;
                    }
                }
            }
        }
    }
    out
}

// ── LSTM ─────────────────────────────────────────────────────────────

/// Per-timestep activations saved by the forward pass for BPTT.
/// Gate layout per step: [i | f | g | o], each of width h, post-activation.
pub(crate) struct LstmCache<S: Scalar> {
    pub gates: Vec<S>,  // t×4h
    pub cells: Vec<S>,  // t×h
    pub tanh_c: Vec<S>, // t×h
}

/// Single-direction LSTM over t steps, zero initial state, single bias per
/// gate set. x: t×din, w_ih: 4h×din, w_hh: 4h×h, b: 4h. Returns h-sequence
/// t×h and optionally fills the backward cache.
pub(crate) fn lstm_dir<S: Scalar>(
    x: &[S],
    t: usize,
    din: usize,
    w_ih: &[S],
    w_hh: &[S],
    b: &[S],
    h: usize,
    mut cache: Option<&mut LstmCache<S>>,
) -> Vec<S> {
    debug_assert_eq!(x.len(), t * din);
    debug_assert_eq!(w_ih.len(), 4 * h * din);
    debug_assert_eq!(w_hh.len(), 4 * h * h);
    debug_assert_eq!(b.len(), 4 * h);
    mac_add((t * (4 * h * din + 4 * h * h)) as u64);

    if let Some(c) = cache.as_deref_mut() {
        c.gates.clear();
        c.gates.resize(t * 4 * h, S::zero());
        c.cells.clear();
        c.cells.resize(t * h, S::zero());
        c.tanh_c.clear();
        c.tanh_c.resize(t * h, S::zero());
    }

    // transposed weights put the 4h gate axis innermost
    let w_ih_t = transpose(w_ih, 4 * h, din); // din×4h
    let w_hh_t = transpose(w_hh, 4 * h, h); // h×4h

    let mut out = vec![S::zero(); t * h];
    let mut h_prev = vec![S::zero(); h];
    let mut c_prev = vec![S::zero(); h];
    let mut pre = vec![S::zero(); 4 * h];

    for ti in 0..t {
        let x_t = &x[ti * din..(ti + 1) * din];
        pre.copy_from_slice(b);
        for (p, &xv) in x_t.iter().enumerate() {
            let w_row = &w_ih_t[p * 4 * h..(p + 1) * 4 * h];
            for (o, &wv) in pre.iter_mut().zip(w_row.iter()) {
                *o = *o + xv * wv;
            }
        }
        for (p, &hv) in h_prev.iter().enumerate() {
            let w_row = &w_hh_t[p * 4 * h..(p + 1) * 4 * h];
            for (o, &wv) in pre.iter_mut().zip(w_row.iter()) {
                *o = *o + hv * wv;
            }
        }
        for j in 0..h {
            let ig = sigmoid(pre[j]);
            let fg = sigmoid(pre[h + j]);
            let gg = tanh_fast(pre[2 * h + j]);
            let og = sigmoid(pre[3 * h + j]);
            let c_new = fg * c_prev[j] + ig * gg;
            let tc = tanh_fast(c_new);
            let h_new = og * tc;
            if let Some(cch) = cache.as_deref_mut() {
                cch.gates[ti * 4 * h + j] = ig;
                cch.gates[ti * 4 * h + h + j] = fg;
                cch.gates[ti * 4 * h + 2 * h + j] = gg;
                cch.gates[ti * 4 * h + 3 * h + j] = og;
                cch.cells[ti * h + j] = c_new;
                cch.tanh_c[ti * h + j] = tc;
            }
            c_prev[j] = c_new;
            h_prev[j] = h_new;
            out[ti * h + j] = h_new;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_case() {
        // [1 2; 3 4] · [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
        let bt = [5.0f64, 7.0, 6.0, 8.0]; // transpose of b
        assert_eq!(matmul_nt(&a, &bt, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn mac_tally_counts_products() {
        mac_tally_reset();
        let a = vec![1.0f32; 3 * 4];
        let b = vec![1.0f32; 4 * 5];
        let _ = matmul(&a, &b, 3, 4, 5);
        assert_eq!(mac_tally_read(), 60);
        let _ = matmul_tn_untallied(&a, &b, 1, 12, 20.min(b.len() / 1));
        assert_eq!(mac_tally_read(), 60);
        mac_tally_reset();
    }

    #[test]
    fn conv_lengths_match_stride_arithmetic() {
        assert_eq!(conv_out_len(16000, 10, 5), Some(3199));
        assert_eq!(conv_out_len(9, 10, 5), None);
        // zero input, zero bias stays zero through the stack
        let x = vec![0.0f32; 50 * 2];
        let w = vec![0.3f32; 4 * 2 * 3];
        let b = vec![0.0f32; 4];
        let (y, t_out) = conv1d(&x, 50, 2, &w, &b, 4, 3, 2);
        assert_eq!(t_out, 24);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut x = vec![1.0f32, 2.0, 3.0, -1.0, 0.0, 1.0];
        softmax_rows_inplace(&mut x, 2, 3);
        for row in x.chunks(3) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let eps = 1e-6;
            let fd = (gelu_val(x + eps) - gelu_val(x - eps)) / (2.0 * eps);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn lstm_zero_weights_give_zero_output() {
        let t = 5;
        let (din, h) = (3, 4);
        let x = vec![0.8f64; t * din];
        let w_ih = vec![0.0; 4 * h * din];
        let w_hh = vec![0.0; 4 * h * h];
        let b = vec![0.0; 4 * h];
        let y = lstm_dir(&x, t, din, &w_ih, &w_hh, &b, h, None);
        assert!(y.iter().all(|&v| v == 0.0));
    }
}
