use serde::{Deserialize, Serialize};

use super::checkpoint::*;
use crate::autograd::{Graph, Var, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Places in a layer where activations can be captured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookSite {
    /// Residual stream entering the layer, `[B, S, hidden]`.
    LayerInput,
    /// Residual stream leaving the layer, `[B, S, hidden]`.
    LayerOutput,
    /// Output of one of the layer's pre-norms, `[B, S, hidden]`.
    PostNormHidden,
    /// Gated MLP activation `silu(gate) * up`, `[B, S, intermediate]`.
    FfnIntermediate,
    /// Per-head attention output before the O projection, `[B, S, heads, head_dim]`.
    HeadOutput,
}

/// Which pre-norm [`HookSite::PostNormHidden`] reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormTap {
    #[default]
    Attention,
    Mlp,
}

/// A copy of one activation taken during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct HookRecord {
    pub site: HookSite,
    pub layer_index: usize,
    pub captured: Tensor,
}

/// Token ids laid out `[batch, seq_len]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBatch {
    batch: usize,
    seq_len: usize,
    ids: Vec<u32>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq_len: usize, ids: Vec<u32>) -> Result<Self> {
        if batch.checked_mul(seq_len) != Some(ids.len()) {
            return Err(Error::invalid(format!(
                "{} token ids do not fill a {batch}x{seq_len} batch",
                ids.len()
            )));
        }
        Ok(Self { batch, seq_len, ids })
    }

    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self> {
        let seq_len = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != seq_len) {
            return Err(Error::invalid("rows of different lengths"));
        }
        Self::new(rows.len(), seq_len, rows.concat())
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.ids[i * self.seq_len..(i + 1) * self.seq_len]
    }

    /// Rows `start..end` as a new batch.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.batch {
            return Err(Error::invalid(format!("rows {start}..{end} of {}", self.batch)));
        }
        Self::new(
            end - start,
            self.seq_len,
            self.ids[start * self.seq_len..end * self.seq_len].to_vec(),
        )
    }

    /// Next-token targets for every position; the last column is ignored.
    pub fn shifted_targets(&self) -> Vec<usize> {
        let mut t = Vec::with_capacity(self.ids.len());
        for r in 0..self.batch {
            let row = self.row(r);
            t.extend(row[1..].iter().map(|&x| x as usize));
            if self.seq_len > 0 {
                t.push(IGNORE_INDEX);
            }
        }
        t
    }
}

/// Hook selection and structural masks for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    pub sites: Vec<HookSite>,
    pub norm_tap: NormTap,
    /// Per-layer multiplier on the gated MLP activation (length `intermediate`).
    pub ffn_mask: Option<Vec<Vec<f32>>>,
    /// Per-layer multiplier on each head's output (length `num_heads`).
    pub head_mask: Option<Vec<Vec<f32>>>,
}

impl ForwardOptions {
    pub fn hooks(sites: &[HookSite]) -> Self {
        Self {
            sites: sites.to_vec(),
            ..Self::default()
        }
    }
}

/// Handles into a graph built by [`forward_graph`].
pub struct GraphForward {
    /// `[B * S, vocab]`.
    pub logits: Var,
    /// Leaves for every checkpoint tensor, in canonical order.
    pub params: Vec<(String, Var)>,
    pub hooks: Vec<HookRecord>,
}

/// Logits and captured activations of a plain forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B, S, vocab]`.
    pub logits: Tensor,
    pub hooks: Vec<HookRecord>,
}

pub fn check_tokens(ckpt: &Checkpoint, tokens: &TokenBatch) -> Result<()> {
    let cfg = &ckpt.config;
    if tokens.seq_len() > cfg.max_seq_len {
        return Err(Error::invalid(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.seq_len(),
            cfg.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.ids().iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::invalid(format!(
            "token id {bad} out of range for vocabulary {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

fn mask_len(masks: &Option<Vec<Vec<f32>>>, layers: usize, width: usize, what: &str) -> Result<()> {
    if let Some(m) = masks {
        if m.len() != layers || m.iter().any(|r| r.len() != width) {
            return Err(Error::invalid(format!("{what} mask must be {layers} rows of {width}")));
        }
    }
    Ok(())
}

/// Records the forward pass into `g`. With `trainable` every checkpoint
/// tensor becomes a gradient-carrying leaf.
pub fn forward_graph(
    g: &mut Graph,
    ckpt: &Checkpoint,
    tokens: &TokenBatch,
    opts: &ForwardOptions,
    trainable: bool,
) -> Result<GraphForward> {
    ckpt.ensure_valid()?;
    check_tokens(ckpt, tokens)?;
    let cfg = &ckpt.config;
    mask_len(&opts.ffn_mask, cfg.num_layers, cfg.intermediate_size, "ffn")?;
    mask_len(&opts.head_mask, cfg.num_layers, cfg.num_heads, "head")?;
    if tokens.batch() == 0 || tokens.seq_len() == 0 {
        return Err(Error::invalid("empty token batch"));
    }

    let mut params = Vec::new();
    let mut leaf = |g: &mut Graph, name: &str| -> Result<Var> {
        let t = ckpt.get(name)?.clone();
        let v = if trainable { g.param(t) } else { g.constant(t) };
        params.push((name.to_string(), v));
        Ok(v)
    };

    let (b, s) = (tokens.batch(), tokens.seq_len());
    let (h, nh, nkv, hd) = (cfg.hidden_size, cfg.num_heads, cfg.num_kv_heads, cfg.head_dim);
    let want = |site| opts.sites.contains(&site);
    let mut hooks = Vec::new();
    let mut capture = |g: &Graph, site, layer, v: Var, shape: &[usize]| -> Result<()> {
        hooks.push(HookRecord {
            site,
            layer_index: layer,
            captured: g.value(v).clone().reshape(shape.to_vec())?,
        });
        Ok(())
    };

    let embed = leaf(g, EMBED)?;
    let ids: Vec<usize> = tokens.ids().iter().map(|&t| t as usize).collect();
    let mut x = g.embedding(embed, &ids)?;
    let scale = 1.0 / (hd as f32).sqrt();

    for l in 0..cfg.num_layers {
        let in_norm = leaf(g, &layer_name(l, INPUT_NORM))?;
        let wq = leaf(g, &layer_name(l, Q_PROJ))?;
        let wk = leaf(g, &layer_name(l, K_PROJ))?;
        let wv = leaf(g, &layer_name(l, V_PROJ))?;
        let wo = leaf(g, &layer_name(l, O_PROJ))?;
        let post_norm = leaf(g, &layer_name(l, POST_NORM))?;
        let wg = leaf(g, &layer_name(l, GATE_PROJ))?;
        let wu = leaf(g, &layer_name(l, UP_PROJ))?;
        let wd = leaf(g, &layer_name(l, DOWN_PROJ))?;

        if want(HookSite::LayerInput) {
            capture(g, HookSite::LayerInput, l, x, &[b, s, h])?;
        }
        let hn = g.rms_norm(x, in_norm, cfg.norm_eps)?;
        if want(HookSite::PostNormHidden) && opts.norm_tap == NormTap::Attention {
            capture(g, HookSite::PostNormHidden, l, hn, &[b, s, h])?;
        }

        let q = g.linear(hn, wq)?;
        let q = g.reshape(q, &[b, s, nh, hd])?;
        let q = g.rope(q, 0, cfg.rope_base)?;
        let q = g.swap_axes12(q)?;
        let k = g.linear(hn, wk)?;
        let k = g.reshape(k, &[b, s, nkv, hd])?;
        let k = g.rope(k, 0, cfg.rope_base)?;
        let k = g.swap_axes12(k)?;
        let k = g.repeat_kv(k, nh / nkv)?;
        let v = g.linear(hn, wv)?;
        let v = g.reshape(v, &[b, s, nkv, hd])?;
        let v = g.swap_axes12(v)?;
        let v = g.repeat_kv(v, nh / nkv)?;

        let q = g.reshape(q, &[b * nh, s, hd])?;
        let k = g.reshape(k, &[b * nh, s, hd])?;
        let v = g.reshape(v, &[b * nh, s, hd])?;
        let scores = g.bmm(q, k, false, true)?;
        let scores = g.scale(scores, scale);
        let scores = g.causal_mask(scores)?;
        let probs = g.softmax(scores);
        let att = g.bmm(probs, v, false, false)?;
        let att = g.reshape(att, &[b, nh, s, hd])?;
        let mut att = g.swap_axes12(att)?;
        if want(HookSite::HeadOutput) {
            capture(g, HookSite::HeadOutput, l, att, &[b, s, nh, hd])?;
        }
        if let Some(m) = &opts.head_mask {
            let full: Vec<f32> = (0..b * s)
                .flat_map(|_| m[l].iter().flat_map(|&w| std::iter::repeat(w).take(hd)))
                .collect();
            let mv = g.constant(Tensor::new(vec![b, s, nh, hd], full)?);
            att = g.mul(att, mv)?;
        }
        let att = g.reshape(att, &[b * s, nh * hd])?;
        let o = g.linear(att, wo)?;
        let x1 = g.add(x, o)?;

        let hm = g.rms_norm(x1, post_norm, cfg.norm_eps)?;
        if want(HookSite::PostNormHidden) && opts.norm_tap == NormTap::Mlp {
            capture(g, HookSite::PostNormHidden, l, hm, &[b, s, h])?;
        }
        let gate = g.linear(hm, wg)?;
        let gate = g.silu(gate);
        let up = g.linear(hm, wu)?;
        let mut act = g.mul(gate, up)?;
        if want(HookSite::FfnIntermediate) {
            capture(g, HookSite::FfnIntermediate, l, act, &[b, s, cfg.intermediate_size])?;
        }
        if let Some(m) = &opts.ffn_mask {
            let full: Vec<f32> = (0..b * s).flat_map(|_| m[l].iter().copied()).collect();
            let mv = g.constant(Tensor::new(vec![b * s, cfg.intermediate_size], full)?);
            act = g.mul(act, mv)?;
        }
        let down = g.linear(act, wd)?;
        x = g.add(x1, down)?;
        if want(HookSite::LayerOutput) {
            capture(g, HookSite::LayerOutput, l, x, &[b, s, h])?;
        }
    }

    let fnorm = leaf(g, FINAL_NORM)?;
    let xf = g.rms_norm(x, fnorm, cfg.norm_eps)?;
    let head = if cfg.tie_embeddings { embed } else { leaf(g, LM_HEAD)? };
    let logits = g.linear(xf, head)?;
    Ok(GraphForward { logits, params, hooks })
}

pub fn forward_with(ckpt: &Checkpoint, tokens: &TokenBatch, opts: &ForwardOptions) -> Result<ForwardOutput> {
    let mut g = Graph::new();
    let out = forward_graph(&mut g, ckpt, tokens, opts, false)?;
    let logits = g
        .value(out.logits)
        .clone()
        .reshape(vec![tokens.batch(), tokens.seq_len(), ckpt.config.vocab_size])?;
    if !logits.is_finite() {
        return Err(Error::numeric("forward produced non-finite logits"));
    }
    Ok(ForwardOutput {
        logits,
        hooks: out.hooks,
    })
}

/// Causal forward pass capturing the requested hook sites in every layer.
pub fn forward(ckpt: &Checkpoint, tokens: &TokenBatch, sites: &[HookSite]) -> Result<ForwardOutput> {
    forward_with(ckpt, tokens, &ForwardOptions::hooks(sites))
}

/// Mean next-token cross-entropy (nats) with teacher forcing.
pub fn lm_loss(ckpt: &Checkpoint, tokens: &TokenBatch) -> Result<f64> {
    let mut g = Graph::new();
    let out = forward_graph(&mut g, ckpt, tokens, &ForwardOptions::default(), false)?;
    let loss = g.cross_entropy(out.logits, &tokens.shifted_targets())?;
    g.scalar_f64(loss)
}
