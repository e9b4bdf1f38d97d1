use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `S_ij = |w_ij|`.
pub fn score_magnitude(w: &Tensor) -> Tensor {
    let data = w.data().iter().map(|v| v.abs()).collect();
    Tensor::new(w.shape().to_vec(), data).expect("same shape")
}

/// Flat indices of scores strictly below `tau`.
pub fn below_threshold(scores: &Tensor, tau: f32) -> Vec<usize> {
    scores
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &s)| s < tau)
        .map(|(i, _)| i)
        .collect()
}

/// `S_ij = |w_ij| * x_norms[j]` for `w: [out, in]`.
pub fn score_wanda(w: &Tensor, x_norms: &[f32]) -> Result<Tensor> {
    let (rows, cols) = w.dims2()?;
    if x_norms.len() != cols {
        return Err(Error::invalid(format!(
            "{} activation norms for {cols} input features",
            x_norms.len()
        )));
    }
    if x_norms.iter().any(|&n| !(n >= 0.0)) {
        return Err(Error::invalid("activation norms must be non-negative"));
    }
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        out.extend(w.row(r).iter().zip(x_norms).map(|(v, n)| v.abs() * n));
    }
    Tensor::new(vec![rows, cols], out)
}

/// Keeps the `k` highest-scoring entries of every row independently.
/// Returns sorted kept column indices per row.
pub fn topk_per_row(scores: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    let (rows, cols) = scores.dims2()?;
    if k > cols {
        return Err(Error::invalid(format!("k = {k} exceeds row length {cols}")));
    }
    (0..rows)
        .map(|r| {
            if k == 0 {
                Ok(Vec::new())
            } else {
                crate::surgery::select_topk(scores.row(r), k)
            }
        })
        .collect()
}
