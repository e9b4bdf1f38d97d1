use std::collections::BTreeMap;

use super::spec::{check_sorted, head_grouping, Keep, PerLayer, PruneSpec};
use crate::error::{Error, Result};
use crate::model::*;
use crate::tensor::Tensor;

/// Indices of the `k` largest scores, ties to the lower index, returned
/// in ascending order.
pub fn select_topk<T: Copy + Into<f64>>(scores: &[T], k: usize) -> Result<Vec<usize>> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k = {k} must be in 1..={n}")));
    }
    let vals: Vec<f64> = scores.iter().map(|&s| s.into()).collect();
    if vals.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("scores contain NaN"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

fn take(ckpt: &Checkpoint, name: &str) -> Result<Tensor> {
    Ok(ckpt.get(name)?.clone())
}

/// Rows `[i * block, (i + 1) * block)` for every kept `i`.
fn block_rows(t: &Tensor, kept: &[usize], block: usize) -> Result<Tensor> {
    let rows: Vec<usize> = kept.iter().flat_map(|&i| i * block..(i + 1) * block).collect();
    t.select_rows(&rows)
}

fn block_cols(t: &Tensor, kept: &[usize], block: usize) -> Result<Tensor> {
    let cols: Vec<usize> = kept.iter().flat_map(|&i| i * block..(i + 1) * block).collect();
    t.select_cols(&cols)
}

/// Removes whole layers; survivors keep their order and values.
pub fn prune_depth(ckpt: &Checkpoint, drop_layers: &[usize]) -> Result<Checkpoint> {
    ckpt.ensure_valid()?;
    let cfg = &ckpt.config;
    check_sorted(drop_layers, cfg.num_layers, "drop_layers")?;
    if drop_layers.is_empty() {
        return Ok(ckpt.clone());
    }
    if drop_layers.len() == cfg.num_layers {
        return Err(Error::invalid("cannot drop every layer"));
    }
    let mut tensors = BTreeMap::new();
    let mut new_idx = 0;
    for l in 0..cfg.num_layers {
        if drop_layers.binary_search(&l).is_ok() {
            continue;
        }
        let prefix = format!("layers.{l}.");
        for (name, t) in ckpt.tensors.range(prefix.clone()..) {
            let Some(suffix) = name.strip_prefix(&prefix) else {
                break;
            };
            tensors.insert(layer_name(new_idx, suffix), t.clone());
        }
        new_idx += 1;
    }
    for (name, t) in &ckpt.tensors {
        if !name.starts_with("layers.") {
            tensors.insert(name.clone(), t.clone());
        }
    }
    let mut config = cfg.clone();
    config.num_layers = new_idx;
    Ok(Checkpoint {
        config,
        tensors,
        meta: ckpt.meta.clone(),
    })
}

/// Slices every layer's MLP to the kept intermediate channels.
pub fn prune_ffn(ckpt: &Checkpoint, keep: &PerLayer) -> Result<Checkpoint> {
    ckpt.ensure_valid()?;
    let cfg = &ckpt.config;
    let width = keep.check(cfg.num_layers, cfg.intermediate_size, "keep_ffn")?;
    if keep.is_all() {
        return Ok(ckpt.clone());
    }
    let mut out = ckpt.clone();
    for l in 0..cfg.num_layers {
        let kept = keep.layer(l).resolve(cfg.intermediate_size);
        for n in [GATE_PROJ, UP_PROJ] {
            let t = take(ckpt, &layer_name(l, n))?.select_rows(&kept)?;
            out.tensors.insert(layer_name(l, n), t);
        }
        let t = take(ckpt, &layer_name(l, DOWN_PROJ))?.select_cols(&kept)?;
        out.tensors.insert(layer_name(l, DOWN_PROJ), t);
    }
    out.config.intermediate_size = width;
    Ok(out)
}

/// Keeps the chosen query heads; KV heads left without queries are removed.
pub fn prune_heads(ckpt: &Checkpoint, keep: &PerLayer) -> Result<Checkpoint> {
    ckpt.ensure_valid()?;
    let cfg = &ckpt.config;
    let heads = keep.check(cfg.num_layers, cfg.num_heads, "keep_heads")?;
    if keep.is_all() {
        return Ok(ckpt.clone());
    }
    let hd = cfg.head_dim;
    let mut out = ckpt.clone();
    let mut kv_count = None;
    for l in 0..cfg.num_layers {
        let kept = keep.layer(l).resolve(cfg.num_heads);
        let (kv, _) = head_grouping(cfg, &kept)?;
        if *kv_count.get_or_insert(kv.len()) != kv.len() {
            return Err(Error::invalid("every layer must keep the same number of KV heads"));
        }
        let q = block_rows(ckpt.layer(l, Q_PROJ)?, &kept, hd)?;
        let o = block_cols(ckpt.layer(l, O_PROJ)?, &kept, hd)?;
        let k = block_rows(ckpt.layer(l, K_PROJ)?, &kv, hd)?;
        let v = block_rows(ckpt.layer(l, V_PROJ)?, &kv, hd)?;
        out.tensors.insert(layer_name(l, Q_PROJ), q);
        out.tensors.insert(layer_name(l, O_PROJ), o);
        out.tensors.insert(layer_name(l, K_PROJ), k);
        out.tensors.insert(layer_name(l, V_PROJ), v);
    }
    out.config.num_heads = heads;
    out.config.num_kv_heads = kv_count.unwrap_or(cfg.num_kv_heads);
    Ok(out)
}

/// Slices the hidden axis of every tensor that has one. `head_dim` is
/// left unchanged.
pub fn prune_hidden(ckpt: &Checkpoint, keep: &Keep) -> Result<Checkpoint> {
    ckpt.ensure_valid()?;
    let cfg = &ckpt.config;
    keep.check(cfg.hidden_size, "keep_hidden")?;
    if keep.is_all() {
        return Ok(ckpt.clone());
    }
    let kept = keep.resolve(cfg.hidden_size);
    let mut out = ckpt.clone();
    let mut set = |name: String, t: Tensor| {
        out.tensors.insert(name, t);
    };
    set(EMBED.into(), ckpt.get(EMBED)?.select_cols(&kept)?);
    set(FINAL_NORM.into(), ckpt.get(FINAL_NORM)?.select(&kept)?);
    if !cfg.tie_embeddings {
        set(LM_HEAD.into(), ckpt.get(LM_HEAD)?.select_cols(&kept)?);
    }
    for l in 0..cfg.num_layers {
        for n in [INPUT_NORM, POST_NORM] {
            set(layer_name(l, n), ckpt.layer(l, n)?.select(&kept)?);
        }
        for n in [Q_PROJ, K_PROJ, V_PROJ, GATE_PROJ, UP_PROJ] {
            set(layer_name(l, n), ckpt.layer(l, n)?.select_cols(&kept)?);
        }
        for n in [O_PROJ, DOWN_PROJ] {
            set(layer_name(l, n), ckpt.layer(l, n)?.select_rows(&kept)?);
        }
    }
    out.config.hidden_size = kept.len();
    Ok(out)
}

/// Applies depth, head, FFN and hidden pruning in that order and records
/// the parent digest and spec in `meta`.
pub fn apply_spec(ckpt: &Checkpoint, spec: &PruneSpec) -> Result<Checkpoint> {
    spec.target_config(&ckpt.config)?;
    let parent = ckpt.weights_digest()?;
    let out = prune_depth(ckpt, &spec.drop_layers)?;
    let out = prune_heads(&out, &spec.keep_heads)?;
    let out = prune_ffn(&out, &spec.keep_ffn)?;
    let mut out = prune_hidden(&out, &spec.keep_hidden)?;
    if !spec.is_identity() {
        out.meta.insert("parent".into(), parent);
        out.meta.insert("prune_spec".into(), serde_json::to_string(spec)?);
    }
    out.ensure_valid()?;
    Ok(out)
}

/// 0/1 masks that reproduce `keep` on the unpruned model.
pub fn keep_mask(keep: &PerLayer, layers: usize, width: usize) -> Vec<Vec<f32>> {
    (0..layers)
        .map(|l| {
            let mut m = vec![0.0; width];
            for i in keep.layer(l).resolve(width) {
                m[i] = 1.0;
            }
            m
        })
        .collect()
}
