use std::time::{Duration, Instant};

use super::checkpoint::*;
use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::kernels;

struct LayerWeights<'a> {
    input_norm: &'a [f32],
    q: &'a [f32],
    k: &'a [f32],
    v: &'a [f32],
    o: &'a [f32],
    post_norm: &'a [f32],
    gate: &'a [f32],
    up: &'a [f32],
    down: &'a [f32],
}

/// Incremental decoder that keeps every layer's keys and values so each
/// new token costs one pass over the cache.
pub struct Decoder<'a> {
    cfg: &'a ModelConfig,
    embed: &'a [f32],
    final_norm: &'a [f32],
    head: &'a [f32],
    layers: Vec<LayerWeights<'a>>,
    k_cache: Vec<Vec<f32>>,
    v_cache: Vec<Vec<f32>>,
    inv_freq: Vec<f64>,
    pos: usize,
}

/// `out[rows, n] = x[rows, k] · wᵀ` for `w: [n, k]`.
fn project(x: &[f32], w: &[f32], rows: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0; rows * n];
    kernels::gemm(false, true, rows, k, n, 1.0, x, w, 0.0, &mut out);
    out
}

impl<'a> Decoder<'a> {
    pub fn new(ckpt: &'a Checkpoint) -> Result<Self> {
        ckpt.ensure_valid()?;
        let cfg = &ckpt.config;
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            layers.push(LayerWeights {
                input_norm: ckpt.layer(l, INPUT_NORM)?.data(),
                q: ckpt.layer(l, Q_PROJ)?.data(),
                k: ckpt.layer(l, K_PROJ)?.data(),
                v: ckpt.layer(l, V_PROJ)?.data(),
                o: ckpt.layer(l, O_PROJ)?.data(),
                post_norm: ckpt.layer(l, POST_NORM)?.data(),
                gate: ckpt.layer(l, GATE_PROJ)?.data(),
                up: ckpt.layer(l, UP_PROJ)?.data(),
                down: ckpt.layer(l, DOWN_PROJ)?.data(),
            });
        }
        Ok(Self {
            cfg,
            embed: ckpt.get(EMBED)?.data(),
            final_norm: ckpt.get(FINAL_NORM)?.data(),
            head: ckpt.head()?.data(),
            k_cache: vec![Vec::new(); cfg.num_layers],
            v_cache: vec![Vec::new(); cfg.num_layers],
            layers,
            inv_freq: kernels::rope_inv_freq(cfg.head_dim, cfg.rope_base),
            pos: 0,
        })
    }

    /// Number of tokens already consumed.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Consumes `tokens` and returns the logits after the last one.
    pub fn feed(&mut self, tokens: &[u32]) -> Result<Vec<f32>> {
        let cfg = self.cfg;
        let t = tokens.len();
        if t == 0 {
            return Err(Error::invalid("feed() needs at least one token"));
        }
        if self.pos + t > cfg.max_seq_len {
            return Err(Error::invalid(format!("decoding past max_seq_len {}", cfg.max_seq_len)));
        }
        let (h, nh, hd) = (cfg.hidden_size, cfg.num_heads, cfg.head_dim);
        let (qw, kw, inter) = (cfg.q_width(), cfg.kv_width(), cfg.intermediate_size);
        let group = cfg.group_size();
        let mut x = Vec::with_capacity(t * h);
        for &tok in tokens {
            let id = tok as usize;
            if id >= cfg.vocab_size {
                return Err(Error::invalid(format!("token id {tok} out of range")));
            }
            x.extend_from_slice(&self.embed[id * h..(id + 1) * h]);
        }
        let scale = 1.0 / (hd as f32).sqrt();
        let mut normed = vec![0.0; t * h];
        let mut scores = Vec::new();
        for (l, w) in self.layers.iter().enumerate() {
            kernels::rms_norm(&x, w.input_norm, cfg.norm_eps, &mut normed);
            let mut q = project(&normed, w.q, t, h, qw);
            let mut k = project(&normed, w.k, t, h, kw);
            let v = project(&normed, w.v, t, h, kw);
            for i in 0..t {
                for head in q[i * qw..(i + 1) * qw].chunks_exact_mut(hd) {
                    kernels::rope_apply(head, self.pos + i, &self.inv_freq, 1.0);
                }
                for head in k[i * kw..(i + 1) * kw].chunks_exact_mut(hd) {
                    kernels::rope_apply(head, self.pos + i, &self.inv_freq, 1.0);
                }
            }
            self.k_cache[l].extend_from_slice(&k);
            self.v_cache[l].extend_from_slice(&v);
            let (kc, vc) = (&self.k_cache[l], &self.v_cache[l]);

            let mut att = vec![0.0; t * qw];
            for i in 0..t {
                let span = self.pos + i + 1;
                for hq in 0..nh {
                    let kv = hq / group;
                    let qv = &q[i * qw + hq * hd..i * qw + (hq + 1) * hd];
                    scores.clear();
                    scores.extend(
                        (0..span).map(|j| kernels::dot(qv, &kc[j * kw + kv * hd..j * kw + (kv + 1) * hd]) * scale),
                    );
                    kernels::softmax_rows(&mut scores, span);
                    let out = &mut att[i * qw + hq * hd..i * qw + (hq + 1) * hd];
                    for (j, &p) in scores.iter().enumerate() {
                        let vj = &vc[j * kw + kv * hd..j * kw + (kv + 1) * hd];
                        for (o, &vv) in out.iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                }
            }
            let o = project(&att, w.o, t, qw, h);
            for (xv, ov) in x.iter_mut().zip(&o) {
                *xv += ov;
            }

            kernels::rms_norm(&x, w.post_norm, cfg.norm_eps, &mut normed);
            let mut gate = project(&normed, w.gate, t, h, inter);
            let up = project(&normed, w.up, t, h, inter);
            for (gv, &uv) in gate.iter_mut().zip(&up) {
                *gv = kernels::silu(*gv) * uv;
            }
            let down = project(&gate, w.down, t, inter, h);
            for (xv, dv) in x.iter_mut().zip(&down) {
                *xv += dv;
            }
        }
        self.pos += t;
        let last = &x[(t - 1) * h..];
        let mut fin = vec![0.0; h];
        kernels::rms_norm(last, self.final_norm, cfg.norm_eps, &mut fin);
        let mut logits = vec![0.0; cfg.vocab_size];
        kernels::matvec(self.head, &fin, &mut logits);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("decoder produced non-finite logits"));
        }
        Ok(logits)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Result of [`generate`]; `timestamps[i]` is when `tokens[i]` was emitted,
/// measured from the start of the request.
#[derive(Clone, Debug)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub timestamps: Vec<Duration>,
}

/// Greedy decoding with a KV cache. `_seed` is accepted for interface
/// stability; greedy decoding draws no randomness.
pub fn generate(ckpt: &Checkpoint, prompt: &[u32], n_new: usize, _seed: u64) -> Result<Generation> {
    if n_new == 0 {
        return Err(Error::invalid("n_new must be at least 1"));
    }
    if prompt.is_empty() {
        return Err(Error::invalid("prompt must hold at least one token"));
    }
    let max = ckpt.config.max_seq_len;
    if prompt.len() > max {
        return Err(Error::invalid(format!(
            "prompt of {} tokens exceeds max_seq_len {max}",
            prompt.len()
        )));
    }
    if prompt.len() + n_new - 1 > max {
        return Err(Error::invalid(format!(
            "prompt plus {n_new} new tokens exceeds max_seq_len {max}"
        )));
    }
    let start = Instant::now();
    let mut dec = Decoder::new(ckpt)?;
    let mut logits = dec.feed(prompt)?;
    let mut tokens = Vec::with_capacity(n_new);
    let mut timestamps = Vec::with_capacity(n_new);
    loop {
        let next = argmax(&logits) as u32;
        tokens.push(next);
        timestamps.push(start.elapsed());
        if tokens.len() == n_new {
            break;
        }
        logits = dec.feed(&[next])?;
    }
    Ok(Generation { tokens, timestamps })
}
