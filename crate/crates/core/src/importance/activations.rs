use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::*;
use crate::tensor::Tensor;

/// Rows per forward pass while streaming statistics.
pub const STREAM_ROWS: usize = 8;

/// How per-token unit magnitudes are reduced to one score per unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean of `|a|` over every (sample, position), squared.
    AbsMeanThenSquareSum,
    /// l2 norm over the batch at each position, then mean over positions.
    L2BatchMeanSeq,
}

/// Running per-unit aggregate for one hook site of one layer.
///
/// A unit is a channel for hidden and FFN sites, and a head (magnitude =
/// l2 norm of its output vector) for [`HookSite::HeadOutput`]. For
/// [`Aggregation::L2BatchMeanSeq`] the accumulator keeps one slot per
/// `(unit, position)`, laid out unit-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationStats {
    pub site: HookSite,
    pub layer_index: usize,
    pub aggregation: Aggregation,
    pub units: usize,
    pub positions: usize,
    pub per_unit_accum: Vec<f64>,
    /// Tokens seen (abs-mean) or sequences seen (l2-batch).
    pub sample_count: usize,
}

impl ActivationStats {
    pub fn new(site: HookSite, layer_index: usize, aggregation: Aggregation, units: usize) -> Self {
        Self {
            site,
            layer_index,
            aggregation,
            units,
            positions: 0,
            per_unit_accum: match aggregation {
                Aggregation::AbsMeanThenSquareSum => vec![0.0; units],
                Aggregation::L2BatchMeanSeq => Vec::new(),
            },
            sample_count: 0,
        }
    }

    /// Folds one captured `[B, S, units]` or `[B, S, heads, head_dim]` tensor.
    pub fn update(&mut self, captured: &Tensor) -> Result<()> {
        let s = captured.shape();
        if s.len() < 3 || s[2] != self.units {
            return Err(Error::invalid(format!(
                "captured shape {s:?} does not carry {} units on axis 2",
                self.units
            )));
        }
        let (b, seq) = (s[0], s[1]);
        let width: usize = s[3..].iter().product();
        let data = captured.data();
        let magnitude = |i: usize, t: usize, u: usize| -> f64 {
            let base = ((i * seq + t) * self.units + u) * width;
            let v = &data[base..base + width];
            if width == 1 {
                (v[0] as f64).abs()
            } else {
                v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
            }
        };
        match self.aggregation {
            Aggregation::AbsMeanThenSquareSum => {
                for i in 0..b {
                    for t in 0..seq {
                        for u in 0..self.units {
                            self.per_unit_accum[u] += magnitude(i, t, u);
                        }
                    }
                }
                self.sample_count += b * seq;
            }
            Aggregation::L2BatchMeanSeq => {
                if self.positions == 0 {
                    self.positions = seq;
                    self.per_unit_accum = vec![0.0; self.units * seq];
                } else if self.positions != seq {
                    return Err(Error::invalid("sequence length changed while streaming"));
                }
                for i in 0..b {
                    for t in 0..seq {
                        for u in 0..self.units {
                            let m = magnitude(i, t, u);
                            self.per_unit_accum[u * seq + t] += m * m;
                        }
                    }
                }
                self.sample_count += b;
            }
        }
        Ok(())
    }

    /// Per-unit score for this layer.
    pub fn scores(&self) -> Result<Vec<f64>> {
        if self.sample_count == 0 {
            return Err(Error::InvalidState(format!(
                "no samples accumulated for {:?} at layer {}",
                self.site, self.layer_index
            )));
        }
        Ok(match self.aggregation {
            Aggregation::AbsMeanThenSquareSum => self
                .per_unit_accum
                .iter()
                .map(|&a| {
                    let m = a / self.sample_count as f64;
                    m * m
                })
                .collect(),
            Aggregation::L2BatchMeanSeq => (0..self.units)
                .map(|u| {
                    let row = &self.per_unit_accum[u * self.positions..(u + 1) * self.positions];
                    row.iter().map(|v| v.sqrt()).sum::<f64>() / self.positions as f64
                })
                .collect(),
        })
    }
}

fn site_units(cfg: &ModelConfig, site: HookSite) -> usize {
    match site {
        HookSite::FfnIntermediate => cfg.intermediate_size,
        HookSite::HeadOutput => cfg.num_heads,
        _ => cfg.hidden_size,
    }
}

/// Calls `f` on the hook records of every `STREAM_ROWS`-row chunk.
pub fn stream_hooks(
    ckpt: &Checkpoint,
    tokens: &TokenBatch,
    opts: &ForwardOptions,
    mut f: impl FnMut(&[HookRecord]) -> Result<()>,
) -> Result<()> {
    let mut r = 0;
    while r < tokens.batch() {
        let end = (r + STREAM_ROWS).min(tokens.batch());
        let out = forward_with(ckpt, &tokens.slice_rows(r, end)?, opts)?;
        f(&out.hooks)?;
        r = end;
    }
    Ok(())
}

/// Streams the batch through the model and aggregates `site` in every layer.
pub fn collect_stats(
    ckpt: &Checkpoint,
    tokens: &TokenBatch,
    site: HookSite,
    aggregation: Aggregation,
    norm_tap: NormTap,
) -> Result<Vec<ActivationStats>> {
    let cfg = &ckpt.config;
    let mut stats: Vec<ActivationStats> = (0..cfg.num_layers)
        .map(|l| ActivationStats::new(site, l, aggregation, site_units(cfg, site)))
        .collect();
    let opts = ForwardOptions {
        sites: vec![site],
        norm_tap,
        ..Default::default()
    };
    stream_hooks(ckpt, tokens, &opts, |hooks| {
        for h in hooks {
            stats[h.layer_index].update(&h.captured)?;
        }
        Ok(())
    })?;
    Ok(stats)
}

fn require_site(stats: &[ActivationStats], site: HookSite) -> Result<()> {
    if stats.is_empty() {
        return Err(Error::InvalidState("no activation statistics".into()));
    }
    if let Some(s) = stats.iter().find(|s| s.site != site) {
        return Err(Error::invalid(format!(
            "expected {site:?} statistics, found {:?}",
            s.site
        )));
    }
    Ok(())
}

/// Hidden-channel importance: per-layer scores summed over layers.
pub fn minitron_hidden_importance(stats: &[ActivationStats]) -> Result<Vec<f64>> {
    require_site(stats, HookSite::PostNormHidden)?;
    let mut total = vec![0.0; stats[0].units];
    for s in stats {
        if s.units != total.len() {
            return Err(Error::invalid("hidden statistics disagree on width"));
        }
        for (t, v) in total.iter_mut().zip(s.scores()?) {
            *t += v;
        }
    }
    Ok(total)
}

/// FFN-channel importance of each layer on its own.
pub fn minitron_ffn_importance(stats: &[ActivationStats]) -> Result<Vec<Vec<f64>>> {
    require_site(stats, HookSite::FfnIntermediate)?;
    stats.iter().map(ActivationStats::scores).collect()
}

/// FFN-channel importance summed over layers, replicated per layer. This
/// is the literal cross-layer sum; all layers then share one ranking.
pub fn minitron_ffn_importance_summed(stats: &[ActivationStats]) -> Result<Vec<Vec<f64>>> {
    let per_layer = minitron_ffn_importance(stats)?;
    let width = per_layer[0].len();
    if per_layer.iter().any(|r| r.len() != width) {
        return Err(Error::invalid("summed FFN scoring needs equal widths"));
    }
    let total: Vec<f64> = (0..width).map(|j| per_layer.iter().map(|r| r[j]).sum()).collect();
    Ok(vec![total; per_layer.len()])
}

/// Per-head importance for every layer.
pub fn minitron_head_importance(stats: &[ActivationStats]) -> Result<Vec<Vec<f64>>> {
    require_site(stats, HookSite::HeadOutput)?;
    stats.iter().map(ActivationStats::scores).collect()
}

/// Cosine similarity in f64; zero when either vector is degenerate.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa.sqrt() < 1e-8 || bb.sqrt() < 1e-8 {
        return 0.0;
    }
    (ab / (aa * bb).sqrt()).clamp(-1.0, 1.0)
}

/// Accumulates per-sample mean cosine between layer inputs and outputs.
#[derive(Clone, Debug, Default)]
pub struct BlockInfluence {
    sums: Vec<f64>,
    samples: Vec<usize>,
}

impl BlockInfluence {
    pub fn new(layers: usize) -> Self {
        Self {
            sums: vec![0.0; layers],
            samples: vec![0; layers],
        }
    }

    /// `input` and `output` are `[B, S, hidden]` captures of one layer.
    pub fn update(&mut self, layer: usize, input: &Tensor, output: &Tensor) -> Result<()> {
        if input.shape() != output.shape() || input.ndim() != 3 {
            return Err(Error::invalid("block influence needs matching [B, S, H] captures"));
        }
        let s = input.shape();
        let (b, seq, h) = (s[0], s[1], s[2]);
        for i in 0..b {
            let mut acc = 0.0;
            for t in 0..seq {
                let span = (i * seq + t) * h..(i * seq + t + 1) * h;
                acc += cosine(&input.data()[span.clone()], &output.data()[span]);
            }
            self.sums[layer] += acc / seq as f64;
        }
        self.samples[layer] += b;
        Ok(())
    }

    /// `BI_l = 1 - mean cosine`, in `[0, 2]`.
    pub fn scores(&self) -> Result<Vec<f64>> {
        self.sums
            .iter()
            .zip(&self.samples)
            .map(|(&s, &n)| {
                if n == 0 {
                    Err(Error::InvalidState("no samples for block influence".into()))
                } else {
                    Ok((1.0 - s / n as f64).clamp(0.0, 2.0))
                }
            })
            .collect()
    }
}

/// Block Influence of every layer on the calibration batch.
pub fn block_influence(ckpt: &Checkpoint, tokens: &TokenBatch) -> Result<Vec<f64>> {
    let mut bi = BlockInfluence::new(ckpt.config.num_layers);
    let opts = ForwardOptions::hooks(&[HookSite::LayerInput, HookSite::LayerOutput]);
    stream_hooks(ckpt, tokens, &opts, |hooks| {
        let mut inputs = BTreeMap::new();
        for h in hooks {
            match h.site {
                HookSite::LayerInput => {
                    inputs.insert(h.layer_index, &h.captured);
                }
                HookSite::LayerOutput => {
                    let x = inputs
                        .get(&h.layer_index)
                        .ok_or_else(|| Error::InvalidState("layer output before input".into()))?;
                    bi.update(h.layer_index, x, &h.captured)?;
                }
                _ => {}
            }
        }
        Ok(())
    })?;
    bi.scores()
}

/// l2 norm over all (sample, position) pairs of every input feature of
/// each linear layer, keyed by weight name.
pub fn compute_activation_norms(ckpt: &Checkpoint, tokens: &TokenBatch) -> Result<BTreeMap<String, Vec<f32>>> {
    let cfg = &ckpt.config;
    let layers = cfg.num_layers;
    let mut attn_in = vec![vec![0.0f64; cfg.hidden_size]; layers];
    let mut mlp_in = vec![vec![0.0f64; cfg.hidden_size]; layers];
    let mut o_in = vec![vec![0.0f64; cfg.q_width()]; layers];
    let mut down_in = vec![vec![0.0f64; cfg.intermediate_size]; layers];
    let add = |acc: &mut Vec<f64>, t: &Tensor| {
        let w = acc.len();
        for row in t.data().chunks_exact(w) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v as f64 * v as f64;
            }
        }
    };
    let first = ForwardOptions {
        sites: vec![
            HookSite::PostNormHidden,
            HookSite::HeadOutput,
            HookSite::FfnIntermediate,
        ],
        norm_tap: NormTap::Attention,
        ..Default::default()
    };
    stream_hooks(ckpt, tokens, &first, |hooks| {
        for h in hooks {
            let l = h.layer_index;
            match h.site {
                HookSite::PostNormHidden => add(&mut attn_in[l], &h.captured),
                HookSite::HeadOutput => add(&mut o_in[l], &h.captured),
                HookSite::FfnIntermediate => add(&mut down_in[l], &h.captured),
                _ => {}
            }
        }
        Ok(())
    })?;
    let second = ForwardOptions {
        sites: vec![HookSite::PostNormHidden],
        norm_tap: NormTap::Mlp,
        ..Default::default()
    };
    stream_hooks(ckpt, tokens, &second, |hooks| {
        for h in hooks {
            add(&mut mlp_in[h.layer_index], &h.captured);
        }
        Ok(())
    })?;
    let finish = |v: &[f64]| -> Vec<f32> { v.iter().map(|s| s.sqrt() as f32).collect() };
    let mut out = BTreeMap::new();
    for l in 0..layers {
        for n in [Q_PROJ, K_PROJ, V_PROJ] {
            out.insert(layer_name(l, n), finish(&attn_in[l]));
        }
        out.insert(layer_name(l, O_PROJ), finish(&o_in[l]));
        for n in [GATE_PROJ, UP_PROJ] {
            out.insert(layer_name(l, n), finish(&mlp_in[l]));
        }
        out.insert(layer_name(l, DOWN_PROJ), finish(&down_in[l]));
    }
    Ok(out)
}
