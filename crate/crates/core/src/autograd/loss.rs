use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Probabilities are clamped to this floor before taking logarithms.
pub const KL_PROB_FLOOR: f64 = 1e-12;

fn check_temperature(t: f32) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::invalid(format!(
            "temperature must be positive and finite, got {t}"
        )));
    }
    Ok(())
}

/// Temperature-scaled softmax over the last axis.
pub fn softmax_t(logits: &Tensor, temperature: f32) -> Result<Tensor> {
    check_temperature(temperature)?;
    if !logits.is_finite() {
        return Err(Error::numeric("softmax over non-finite logits"));
    }
    let v = *logits.shape().last().unwrap_or(&1);
    let mut out = vec![0.0f32; logits.numel()];
    let mut row = vec![0.0f64; v];
    let mut scaled = vec![0.0f32; v];
    for (src, dst) in logits.data().chunks_exact(v.max(1)).zip(out.chunks_exact_mut(v.max(1))) {
        for (s, &z) in scaled.iter_mut().zip(src) {
            *s = z / temperature;
        }
        kernels::log_softmax_row(&scaled, &mut row);
        for (d, &lp) in dst.iter_mut().zip(&row) {
            *d = lp.exp() as f32;
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

pub(crate) struct KlRows {
    pub loss: f64,
    pub teacher_probs: Vec<f32>,
    pub student_probs: Vec<f32>,
}

pub(crate) fn kl_rows(teacher: &Tensor, student: &Tensor, temperature: f32) -> Result<KlRows> {
    check_temperature(temperature)?;
    if teacher.shape() != student.shape() {
        return Err(Error::invalid(format!(
            "teacher logits {:?} vs student logits {:?}",
            teacher.shape(),
            student.shape()
        )));
    }
    if !teacher.is_finite() || !student.is_finite() {
        return Err(Error::numeric("KL over non-finite logits"));
    }
    let v = *teacher.shape().last().unwrap_or(&1);
    let rows = teacher.numel().checked_div(v).unwrap_or(0);
    let mut teacher_probs = vec![0.0f32; teacher.numel()];
    let mut student_probs = vec![0.0f32; teacher.numel()];
    let (mut lp, mut lq) = (vec![0.0f64; v], vec![0.0f64; v]);
    let (mut zt, mut zs) = (vec![0.0f32; v], vec![0.0f32; v]);
    let floor = KL_PROB_FLOOR.ln();
    let mut total = 0.0f64;
    for r in 0..rows {
        let span = r * v..(r + 1) * v;
        for j in 0..v {
            zt[j] = teacher.data()[r * v + j] / temperature;
            zs[j] = student.data()[r * v + j] / temperature;
        }
        kernels::log_softmax_row(&zt, &mut lp);
        kernels::log_softmax_row(&zs, &mut lq);
        let mut kl = 0.0f64;
        for j in 0..v {
            let p = lp[j].exp();
            kl += p * (lp[j].max(floor) - lq[j].max(floor));
        }
        total += kl;
        for (d, &x) in teacher_probs[span.clone()].iter_mut().zip(&lp) {
            *d = x.exp() as f32;
        }
        for (d, &x) in student_probs[span].iter_mut().zip(&lq) {
            *d = x.exp() as f32;
        }
    }
    let loss = if rows == 0 { 0.0 } else { total / rows as f64 };
    if !loss.is_finite() {
        return Err(Error::numeric("KL divergence is not finite"));
    }
    Ok(KlRows {
        // Rounding can leave tiny negative sums for coinciding distributions.
        loss: loss.max(0.0),
        teacher_probs,
        student_probs,
    })
}

/// Mean over rows of `KL(softmax(teacher / T) || softmax(student / T))`.
pub fn kl_forward(teacher_logits: &Tensor, student_logits: &Tensor, temperature: f32) -> Result<f64> {
    Ok(kl_rows(teacher_logits, student_logits, temperature)?.loss)
}
