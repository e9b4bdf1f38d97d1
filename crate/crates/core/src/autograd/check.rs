use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares the analytic gradient of a scalar function against central
/// differences and returns the worst relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// The numeric derivative uses the fourth-order central stencil at steps
/// `eps` and `2 * eps`, read out in `f64`. `f` receives a fresh graph and
/// the input variable and must return a scalar node.
pub fn finite_diff_check<F>(f: F, point: &Tensor, eps: f32) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let y = f(&mut g, x)?;
    let y0 = g.value(y).item()?;
    if !y0.is_finite() {
        return Err(Error::numeric("function value is not finite"));
    }
    g.backward(y)?;
    let analytic = g.grad(x).expect("leaf gradient").to_vec();

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(p);
        let y = f(&mut g, x)?;
        let v = g.scalar_f64(y)?;
        if !v.is_finite() {
            return Err(Error::numeric("function value is not finite"));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let numeric = central(&eval, point, i, eps)?;
        let a = a as f64;
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

// Returns the perturbed point and the step actually representable in f32.
fn shifted(point: &Tensor, i: usize, d: f32) -> (Tensor, f64) {
    let mut p = point.clone();
    p.data_mut()[i] += d;
    let actual = p.data()[i] as f64 - point.data()[i] as f64;
    (p, actual)
}

pub(crate) fn central<E>(eval: &E, point: &Tensor, i: usize, eps: f32) -> Result<f64>
where
    E: Fn(Tensor) -> Result<f64>,
{
    let diff = |step: f32| -> Result<f64> {
        let (p, hp) = shifted(point, i, step);
        let (m, hm) = shifted(point, i, -step);
        Ok((eval(p)? - eval(m)?) / (hp - hm))
    };
    let d1 = diff(eps)?;
    let d2 = diff(2.0 * eps)?;
    Ok((4.0 * d1 - d2) / 3.0)
}
