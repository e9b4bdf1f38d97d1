use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::model::*;

/// One scalar weight: tensor name and flat index.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WeightRef {
    pub tensor: String,
    pub index: usize,
}

/// `|sum_w w * dL/dw|` over `(weight, gradient)` pairs.
pub fn taylor_score(pairs: &[(f32, f32)]) -> f64 {
    pairs.iter().map(|&(w, g)| w as f64 * g as f64).sum::<f64>().abs()
}

/// Gradient of the mean next-token cross-entropy over the whole batch with
/// respect to every checkpoint tensor.
pub fn lm_gradients(ckpt: &Checkpoint, tokens: &TokenBatch) -> Result<BTreeMap<String, Vec<f64>>> {
    let total = tokens.batch() * tokens.seq_len().saturating_sub(1);
    if total == 0 {
        return Err(Error::invalid("gradients need sequences of length >= 2"));
    }
    let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut r = 0;
    while r < tokens.batch() {
        let end = (r + super::STREAM_ROWS).min(tokens.batch());
        let chunk = tokens.slice_rows(r, end)?;
        let weight = (chunk.batch() * (chunk.seq_len() - 1)) as f64 / total as f64;
        let mut g = Graph::new();
        let out = forward_graph(&mut g, ckpt, &chunk, &ForwardOptions::default(), true)?;
        let loss = g.cross_entropy(out.logits, &chunk.shifted_targets())?;
        g.backward(loss)?;
        for (name, v) in &out.params {
            let gr = g.grad(*v).expect("parameter gradient");
            let acc = grads.entry(name.clone()).or_insert_with(|| vec![0.0; gr.len()]);
            for (a, &x) in acc.iter_mut().zip(gr) {
                *a += weight * x as f64;
            }
        }
        r = end;
    }
    Ok(grads)
}

/// First-order estimate of the loss change from removing each group.
pub fn taylor_group_importance(ckpt: &Checkpoint, tokens: &TokenBatch, groups: &[Vec<WeightRef>]) -> Result<Vec<f64>> {
    for (i, g) in groups.iter().enumerate() {
        if g.is_empty() {
            return Err(Error::invalid(format!("group {i} is empty")));
        }
        for w in g {
            let t = ckpt.get(&w.tensor)?;
            if w.index >= t.numel() {
                return Err(Error::invalid(format!("{}[{}] out of range", w.tensor, w.index)));
            }
        }
    }
    let grads = lm_gradients(ckpt, tokens)?;
    Ok(groups
        .iter()
        .map(|g| {
            g.iter()
                .map(|w| ckpt.tensors[&w.tensor].data()[w.index] as f64 * grads[&w.tensor][w.index])
                .sum::<f64>()
                .abs()
        })
        .collect())
}

/// One group per FFN channel of `layer`: its gate and up rows and down column.
pub fn ffn_channel_groups(cfg: &ModelConfig, layer: usize) -> Vec<Vec<WeightRef>> {
    let (h, inter) = (cfg.hidden_size, cfg.intermediate_size);
    (0..inter)
        .map(|j| {
            let mut g = Vec::with_capacity(3 * h);
            for name in [GATE_PROJ, UP_PROJ] {
                g.extend((0..h).map(|c| WeightRef {
                    tensor: layer_name(layer, name),
                    index: j * h + c,
                }));
            }
            g.extend((0..h).map(|r| WeightRef {
                tensor: layer_name(layer, DOWN_PROJ),
                index: r * inter + j,
            }));
            g
        })
        .collect()
}

/// One group per query head of `layer`: its Q rows and O columns.
pub fn head_groups(cfg: &ModelConfig, layer: usize) -> Vec<Vec<WeightRef>> {
    let (h, hd, qw) = (cfg.hidden_size, cfg.head_dim, cfg.q_width());
    (0..cfg.num_heads)
        .map(|head| {
            let rows = head * hd..(head + 1) * hd;
            let mut g: Vec<WeightRef> = rows
                .clone()
                .flat_map(|r| {
                    (0..h).map(move |c| WeightRef {
                        tensor: layer_name(layer, Q_PROJ),
                        index: r * h + c,
                    })
                })
                .collect();
            g.extend(rows.flat_map(|c| {
                (0..h).map(move |r| WeightRef {
                    tensor: layer_name(layer, O_PROJ),
                    index: r * qw + c,
                })
            }));
            g
        })
        .collect()
}
