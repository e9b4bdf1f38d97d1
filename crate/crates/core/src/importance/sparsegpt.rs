use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative Hessian damping: `lambda = DAMP * mean(diag(X Xᵀ))`.
pub const DAMP: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct SparseGptResult {
    pub weights: Tensor,
    /// `||W X - W_hat X||_F^2`.
    pub recon_error: f64,
    /// Pruned input indices per row, in pruning order.
    pub pruned: Vec<Vec<usize>>,
}

fn hessian(x: &Tensor) -> Result<DMatrix<f64>> {
    let (d, m) = x.dims2()?;
    let xm = DMatrix::from_row_slice(d, m, &x.data().iter().map(|&v| v as f64).collect::<Vec<_>>());
    Ok(&xm * xm.transpose())
}

/// Damped inverse Hessian `(X Xᵀ + lambda I)^-1`.
pub fn damped_inverse_hessian(x: &Tensor) -> Result<DMatrix<f64>> {
    let mut h = hessian(x)?;
    let d = h.nrows();
    let lambda = DAMP * h.diagonal().mean();
    for i in 0..d {
        h[(i, i)] += lambda;
    }
    let inv = h
        .cholesky()
        .ok_or_else(|| Error::numeric("damped Hessian is singular"))?
        .inverse();
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("damped Hessian inverse is not finite"));
    }
    Ok(inv)
}

/// `||(W - V) X||_F^2` in f64.
pub fn reconstruction_error(w: &Tensor, v: &Tensor, x: &Tensor) -> Result<f64> {
    let (rows, d) = w.dims2()?;
    let (d2, m) = x.dims2()?;
    if d != d2 || v.shape() != w.shape() {
        return Err(Error::invalid("reconstruction_error: shape mismatch"));
    }
    let mut total = 0.0;
    for r in 0..rows {
        let diff: Vec<f64> = w
            .row(r)
            .iter()
            .zip(v.row(r))
            .map(|(&a, &b)| a as f64 - b as f64)
            .collect();
        for c in 0..m {
            let y: f64 = (0..d).map(|i| diff[i] * x.data()[i * m + c] as f64).sum();
            total += y * y;
        }
    }
    Ok(total)
}

/// Row-by-row greedy optimal brain surgeon: repeatedly remove the weight
/// with the smallest `w_p^2 / [H^-1]_pp`, shift the remaining weights by
/// `-(w_p / [H^-1]_pp) H^-1[:, p]` and drop `p` from the inverse, until
/// `floor(sparsity * in)` weights of the row are zero.
pub fn sparsegpt_prune(w: &Tensor, x: &Tensor, sparsity: f64) -> Result<SparseGptResult> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::invalid(format!("sparsity must be in [0, 1), got {sparsity}")));
    }
    let (rows, d) = w.dims2()?;
    if x.dims2()?.0 != d {
        return Err(Error::invalid(format!(
            "weights have {d} inputs, calibration has {}",
            x.dims2()?.0
        )));
    }
    let n_prune = (sparsity * d as f64).floor() as usize;
    if n_prune == 0 {
        return Ok(SparseGptResult {
            weights: w.clone(),
            recon_error: 0.0,
            pruned: vec![Vec::new(); rows],
        });
    }
    let hinv0 = damped_inverse_hessian(x)?;
    let mut out = Vec::with_capacity(rows * d);
    let mut pruned = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut row: Vec<f64> = w.row(r).iter().map(|&v| v as f64).collect();
        let mut hinv = hinv0.clone();
        let mut alive = vec![true; d];
        let mut order = Vec::with_capacity(n_prune);
        for _ in 0..n_prune {
            let mut best = None;
            for p in (0..d).filter(|&p| alive[p]) {
                let s = row[p] * row[p] / hinv[(p, p)];
                if best.map_or(true, |(_, b)| s < b) {
                    best = Some((p, s));
                }
            }
            let (p, _) = best.expect("a live weight remains");
            let hpp = hinv[(p, p)];
            if !(hpp > 0.0) {
                return Err(Error::numeric("inverse Hessian lost positive definiteness"));
            }
            let f = row[p] / hpp;
            for i in 0..d {
                if alive[i] {
                    row[i] -= f * hinv[(i, p)];
                }
            }
            row[p] = 0.0;
            alive[p] = false;
            order.push(p);
            let col = hinv.column(p).clone_owned();
            hinv -= (&col * col.transpose()) / hpp;
        }
        out.extend(row.iter().map(|&v| v as f32));
        pruned.push(order);
    }
    let weights = Tensor::new(vec![rows, d], out)?;
    let recon_error = reconstruction_error(w, &weights, x)?;
    Ok(SparseGptResult {
        weights,
        recon_error,
        pruned,
    })
}

/// Reference for small rows: for every row, the least reconstruction error
/// over all masks pruning `floor(sparsity * in)` inputs, with the kept
/// weights refit by least squares. Exponential in `in`; limited to 16.
pub fn exhaustive_prune_errors(w: &Tensor, x: &Tensor, sparsity: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::invalid(format!("sparsity must be in [0, 1), got {sparsity}")));
    }
    let (rows, d) = w.dims2()?;
    let (d2, m) = x.dims2()?;
    if d != d2 {
        return Err(Error::invalid("exhaustive_prune_errors: shape mismatch"));
    }
    if d > 16 {
        return Err(Error::invalid(format!(
            "exhaustive search over {d} inputs is too large"
        )));
    }
    let keep = d - (sparsity * d as f64).floor() as usize;
    let xm = DMatrix::from_row_slice(d, m, &x.data().iter().map(|&v| v as f64).collect::<Vec<_>>());
    let masks: Vec<Vec<usize>> = (0u32..1 << d)
        .filter(|b| b.count_ones() as usize == keep)
        .map(|b| (0..d).filter(|i| b >> i & 1 == 1).collect())
        .collect();
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let wr = DMatrix::from_row_slice(1, d, &w.row(r).iter().map(|&v| v as f64).collect::<Vec<_>>());
        let y = (&wr * &xm).transpose();
        let mut best = f64::INFINITY;
        for mask in &masks {
            let xs = xm.select_rows(mask.iter()).transpose();
            let err = if mask.is_empty() {
                y.norm_squared()
            } else {
                let v = xs
                    .clone()
                    .svd(true, true)
                    .solve(&y, 1e-12)
                    .map_err(|e| Error::numeric(e.to_string()))?;
                (&y - &xs * v).norm_squared()
            };
            best = best.min(err);
        }
        out.push(best);
    }
    Ok(out)
}
