//! Slice-level numeric kernels shared by the autograd graph and the
//! incremental decoder.
//!
//! Every kernel has a fixed reduction order per output element, so results
//! are bitwise reproducible for identical inputs.

/// Additive mask value for disallowed attention positions. Finite, but
/// `exp(MASK - max)` underflows to exactly zero.
pub const MASK_VALUE: f32 = -1.0e30;

/// `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `[m, k]` and
/// `op(b)` is `[k, n]`. `a` is stored `[m, k]` (or `[k, m]` when `ta`),
/// `b` is stored `[k, n]` (or `[n, k]` when `tb`). When `beta == 0` the
/// previous contents of `c` are ignored.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    b: &[f32],
    beta: f32,
    c: &mut [f32],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        } else {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices are exactly m*k, k*n and m*n long and the strides
    // above address only those elements.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `y = W x` for a row-major `w` of shape `[rows, x.len()]`.
pub fn matvec(w: &[f32], x: &[f32], y: &mut [f32]) {
    let k = x.len();
    assert_eq!(w.len(), y.len() * k, "matvec: shape");
    for (row, out) in w.chunks_exact(k.max(1)).zip(y.iter_mut()) {
        *out = dot(row, x);
    }
}

/// Dot product with eight independent lanes so the loop vectorizes.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let xa = &a[c * 8..c * 8 + 8];
        let xb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    let s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    s + tail
}

/// RMS-normalizes every row of `x` (row length `w.len()`) and scales by
/// `w`, returning the per-row `1 / rms` factors.
pub fn rms_norm(x: &[f32], w: &[f32], eps: f32, out: &mut [f32]) -> Vec<f32> {
    let d = w.len();
    let rows = x.len().checked_div(d).unwrap_or(0);
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let ms = xr.iter().map(|v| v * v).sum::<f32>() / d as f32;
        let ir = 1.0 / (ms + eps).sqrt();
        inv.push(ir);
        for ((o, &xv), &wv) in out[r * d..(r + 1) * d].iter_mut().zip(xr).zip(w) {
            *o = xv * ir * wv;
        }
    }
    inv
}

/// In-place softmax over consecutive rows of length `d`.
pub fn softmax_rows(x: &mut [f32], d: usize) {
    if d == 0 {
        return;
    }
    for row in x.chunks_exact_mut(d) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Log-softmax of one row, accumulated in `f64`.
pub fn log_softmax_row(row: &[f32], out: &mut [f64]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v as f64 - lse;
    }
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

/// Inverse frequencies `base^(-2i/head_dim)` for `i < head_dim / 2`.
pub fn rope_inv_freq(head_dim: usize, base: f64) -> Vec<f64> {
    let half = head_dim / 2;
    (0..half)
        .map(|i| base.powf(-(2.0 * i as f64) / head_dim as f64))
        .collect()
}

/// Rotates one head vector in place (half-split convention). `sign = -1`
/// applies the inverse rotation.
pub fn rope_apply(v: &mut [f32], pos: usize, inv_freq: &[f64], sign: f32) {
    let half = inv_freq.len();
    for (i, &f) in inv_freq.iter().enumerate() {
        let theta = pos as f64 * f;
        let (s, c) = theta.sin_cos();
        let (s, c) = (s as f32 * sign, c as f32);
        let a = v[i];
        let b = v[i + half];
        v[i] = a * c - b * s;
        v[i + half] = a * s + b * c;
    }
}
