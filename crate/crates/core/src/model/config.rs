use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_rope_base() -> f64 {
    10000.0
}

fn default_norm_eps() -> f32 {
    1e-5
}

/// Architecture hyperparameters of a decoder-only transformer with
/// pre-norm RMSNorm, rotary attention with grouped KV heads and a gated
/// SiLU MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f32,
    #[serde(default)]
    pub tie_embeddings: bool,
}

impl ModelConfig {
    /// The 8-layer byte-level model used as the desk-scale teacher.
    pub fn toy_teacher() -> Self {
        Self {
            vocab_size: 258,
            hidden_size: 128,
            intermediate_size: 384,
            num_layers: 8,
            num_heads: 4,
            num_kv_heads: 2,
            head_dim: 32,
            max_seq_len: 256,
            rope_base: default_rope_base(),
            norm_eps: default_norm_eps(),
            tie_embeddings: false,
        }
    }

    /// 50-layer Mistral-style geometry of the 11B-class base model. The
    /// vocabulary is a placeholder; totals are predicted with a fitted
    /// embedding mass instead (see [`fit_embedding_mass`]).
    pub fn mistral_like_base() -> Self {
        Self {
            vocab_size: 32768,
            hidden_size: 4096,
            intermediate_size: 14336,
            num_layers: 50,
            num_heads: 32,
            num_kv_heads: 8,
            head_dim: 128,
            max_seq_len: 32768,
            rope_base: 1_000_000.0,
            norm_eps: 1e-5,
            tie_embeddings: false,
        }
    }

    pub fn q_width(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.num_kv_heads * self.head_dim
    }

    /// Query heads sharing each KV head.
    pub fn group_size(&self) -> usize {
        self.num_heads / self.num_kv_heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("hidden_size", self.hidden_size),
            ("intermediate_size", self.intermediate_size),
            ("num_heads", self.num_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("head_dim", self.head_dim),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        if self.num_heads % self.num_kv_heads != 0 {
            return Err(Error::invalid(format!(
                "num_heads {} is not a multiple of num_kv_heads {}",
                self.num_heads, self.num_kv_heads
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::invalid(format!(
                "rotary embeddings need an even head_dim, got {}",
                self.head_dim
            )));
        }
        if !(self.rope_base > 0.0 && self.rope_base.is_finite()) {
            return Err(Error::invalid("rope_base must be positive and finite"));
        }
        if !(self.norm_eps >= 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::invalid("norm_eps must be non-negative and finite"));
        }
        count_params(self).map(|_| ())
    }
}

/// Parameter counts split the way the closed form adds them up.
/// Attention, MLP and norm counts are per layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub attention: u64,
    pub mlp: u64,
    pub norms: u64,
    /// Embeddings, untied head and final norm.
    pub embedding: u64,
    pub layers: u64,
}

impl ParamBreakdown {
    pub fn per_layer(&self) -> u64 {
        self.attention + self.mlp + self.norms
    }

    pub fn total(&self) -> u64 {
        self.embedding + self.layers * self.per_layer()
    }
}

fn mul(xs: &[usize]) -> Result<u64> {
    xs.iter()
        .try_fold(1u64, |acc, &x| acc.checked_mul(x as u64))
        .ok_or_else(|| Error::invalid("parameter count overflows"))
}

fn add(xs: &[u64]) -> Result<u64> {
    xs.iter()
        .try_fold(0u64, |acc, &x| acc.checked_add(x))
        .ok_or_else(|| Error::invalid("parameter count overflows"))
}

pub fn param_breakdown(cfg: &ModelConfig) -> Result<ParamBreakdown> {
    let h = cfg.hidden_size;
    let attention = add(&[
        mul(&[h, cfg.num_heads, cfg.head_dim])?,
        mul(&[2, h, cfg.num_kv_heads, cfg.head_dim])?,
        mul(&[cfg.num_heads, cfg.head_dim, h])?,
    ])?;
    let mlp = mul(&[3, h, cfg.intermediate_size])?;
    let norms = mul(&[2, h])?;
    let heads = if cfg.tie_embeddings { 1 } else { 2 };
    let embedding = add(&[mul(&[heads, cfg.vocab_size, h])?, h as u64])?;
    let b = ParamBreakdown {
        attention,
        mlp,
        norms,
        embedding,
        layers: cfg.num_layers as u64,
    };
    mul(&[cfg.num_layers, b.per_layer() as usize])
        .and_then(|l| add(&[l, embedding]))
        .map(|_| b)
}

/// Closed-form parameter count: embedding mass plus `L` times the per-layer
/// attention, MLP and norm weights.
pub fn count_params(cfg: &ModelConfig) -> Result<u64> {
    Ok(param_breakdown(cfg)?.total())
}

/// Solves `E = reported_total - L * per_layer` for a base model whose total
/// is known but whose vocabulary and tying are not.
pub fn fit_embedding_mass(base: &ModelConfig, reported_total: f64) -> Result<f64> {
    let b = param_breakdown(base)?;
    let e = reported_total - (b.layers * b.per_layer()) as f64;
    if !(e >= 0.0 && e.is_finite()) {
        return Err(Error::invalid(format!(
            "reported total {reported_total} is smaller than the layer parameters"
        )));
    }
    Ok(e)
}

/// Predicted total when the embedding mass is supplied instead of derived.
pub fn predict_params(cfg: &ModelConfig, embedding_mass: f64) -> Result<f64> {
    let b = param_breakdown(cfg)?;
    Ok(embedding_mass + (b.layers * b.per_layer()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 4,
            hidden_size: 2,
            intermediate_size: 3,
            num_layers: 0,
            num_heads: 1,
            num_kv_heads: 1,
            head_dim: 2,
            max_seq_len: 8,
            rope_base: 10000.0,
            norm_eps: 1e-5,
            tie_embeddings: false,
        }
    }

    #[test]
    fn degenerate_hand_count() {
        assert_eq!(count_params(&tiny()).unwrap(), 18);
    }

    #[test]
    fn base_geometry_layer_count() {
        let b = param_breakdown(&ModelConfig::mistral_like_base()).unwrap();
        assert_eq!(b.attention, 41_943_040);
        assert_eq!(b.mlp, 176_160_768);
        assert_eq!(b.norms, 8_192);
        assert_eq!(b.per_layer(), 218_112_000);
    }

    #[test]
    fn rejects_bad_grouping_and_odd_head_dim() {
        let mut c = tiny();
        c.num_heads = 3;
        c.num_kv_heads = 2;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.head_dim = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.hidden_size = 0;
        assert!(c.validate().is_err());
        assert!(tiny().validate().is_ok());
    }

    #[test]
    fn overflow_is_an_error() {
        let mut c = tiny();
        c.vocab_size = usize::MAX / 2;
        c.hidden_size = 1 << 20;
        assert!(count_params(&c).is_err());
    }
}
