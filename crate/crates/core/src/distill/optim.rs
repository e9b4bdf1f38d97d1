use std::collections::BTreeMap;

use super::config::AdamWConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// AdamW with per-tensor first and second moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
    /// Updates applied so far.
    pub t: u64,
}

/// Global l2 norm over all gradients, in f64.
pub fn global_norm(grads: &BTreeMap<String, Vec<f32>>) -> f64 {
    grads
        .values()
        .flatten()
        .map(|&g| g as f64 * g as f64)
        .sum::<f64>()
        .sqrt()
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    /// One update of every tensor in `params` that has a gradient. Weight
    /// decay applies to matrices only, not to norm scales. Gradients are
    /// rescaled to `clip` global norm first when given; returns the norm
    /// before clipping.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Vec<f32>>,
        lr: f64,
        clip: Option<f64>,
    ) -> Result<f64> {
        let norm = global_norm(grads);
        if !norm.is_finite() {
            return Err(Error::numeric("gradient norm is not finite"));
        }
        let scale = match clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown tensor {name}")))?;
            if p.numel() != g.len() {
                return Err(Error::invalid(format!("gradient size mismatch for {name}")));
            }
            let decay = if p.ndim() >= 2 { weight_decay } else { 0.0 };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi as f64 * scale;
                let mn = beta1 * *mi as f64 + (1.0 - beta1) * gi;
                let vn = beta2 * *vi as f64 + (1.0 - beta2) * gi * gi;
                *mi = mn as f32;
                *vi = vn as f32;
                let update = (mn / bc1) / ((vn / bc2).sqrt() + eps) + decay * *w as f64;
                *w = (*w as f64 - lr * update) as f32;
            }
        }
        Ok(norm)
    }
}
