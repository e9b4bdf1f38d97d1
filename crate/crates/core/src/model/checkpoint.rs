use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::format;
use crate::tensor::Tensor;

pub const INIT_STD: f32 = 0.02;

pub(crate) const KIND: &str = "checkpoint";

pub fn layer_name(layer: usize, suffix: &str) -> String {
    format!("layers.{layer}.{suffix}")
}

pub const EMBED: &str = "embed_tokens.weight";
pub const FINAL_NORM: &str = "final_norm.weight";
pub const LM_HEAD: &str = "lm_head.weight";
pub const INPUT_NORM: &str = "input_norm.weight";
pub const POST_NORM: &str = "post_attn_norm.weight";
pub const Q_PROJ: &str = "attn.q_proj.weight";
pub const K_PROJ: &str = "attn.k_proj.weight";
pub const V_PROJ: &str = "attn.v_proj.weight";
pub const O_PROJ: &str = "attn.o_proj.weight";
pub const GATE_PROJ: &str = "mlp.gate_proj.weight";
pub const UP_PROJ: &str = "mlp.up_proj.weight";
pub const DOWN_PROJ: &str = "mlp.down_proj.weight";

/// Every tensor `cfg` requires, in canonical order, with its shape.
pub fn expected_tensors(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (h, i) = (cfg.hidden_size, cfg.intermediate_size);
    let mut out = vec![(EMBED.to_string(), vec![cfg.vocab_size, h])];
    for l in 0..cfg.num_layers {
        out.push((layer_name(l, INPUT_NORM), vec![h]));
        out.push((layer_name(l, Q_PROJ), vec![cfg.q_width(), h]));
        out.push((layer_name(l, K_PROJ), vec![cfg.kv_width(), h]));
        out.push((layer_name(l, V_PROJ), vec![cfg.kv_width(), h]));
        out.push((layer_name(l, O_PROJ), vec![h, cfg.q_width()]));
        out.push((layer_name(l, POST_NORM), vec![h]));
        out.push((layer_name(l, GATE_PROJ), vec![i, h]));
        out.push((layer_name(l, UP_PROJ), vec![i, h]));
        out.push((layer_name(l, DOWN_PROJ), vec![h, i]));
    }
    out.push((FINAL_NORM.to_string(), vec![h]));
    if !cfg.tie_embeddings {
        out.push((LM_HEAD.to_string(), vec![cfg.vocab_size, h]));
    }
    out
}

fn is_norm(name: &str) -> bool {
    name.ends_with("norm.weight")
}

/// One mismatch between a checkpoint and the shapes its config implies.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    Config(String),
    Missing(String),
    Unexpected(String),
    Shape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Config(m) => write!(f, "invalid config: {m}"),
            Violation::Missing(n) => write!(f, "missing tensor {n}"),
            Violation::Unexpected(n) => write!(f, "unexpected tensor {n}"),
            Violation::Shape { name, expected, actual } => {
                write!(f, "tensor {name}: expected shape {expected:?}, found {actual:?}")
            }
        }
    }
}

/// Named weights bound to the config that implies their shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
    pub meta: BTreeMap<String, String>,
}

/// Scaled-normal initialization (std 0.02) with unit norm weights.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Checkpoint> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for (name, shape) in expected_tensors(config) {
        let t = if is_norm(&name) {
            Tensor::full(shape, 1.0)
        } else {
            Tensor::randn(shape, INIT_STD, &mut rng)
        };
        tensors.insert(name, t);
    }
    let mut meta = BTreeMap::new();
    meta.insert("init".into(), format!("normal(0, {INIT_STD})"));
    meta.insert("seed".into(), seed.to_string());
    Ok(Checkpoint {
        config: config.clone(),
        tensors,
        meta,
    })
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid(format!("checkpoint has no tensor {name}")))
    }

    pub fn layer(&self, layer: usize, suffix: &str) -> Result<&Tensor> {
        self.get(&layer_name(layer, suffix))
    }

    /// Output projection; the embedding table when tied.
    pub fn head(&self) -> Result<&Tensor> {
        if self.config.tie_embeddings {
            self.get(EMBED)
        } else {
            self.get(LM_HEAD)
        }
    }

    /// Every mismatch between the tensor table and the config.
    pub fn validate(&self) -> Vec<Violation> {
        if let Err(e) = self.config.validate() {
            return vec![Violation::Config(e.to_string())];
        }
        let expected = expected_tensors(&self.config);
        let mut out = Vec::new();
        for (name, shape) in &expected {
            match self.tensors.get(name) {
                None => out.push(Violation::Missing(name.clone())),
                Some(t) if t.shape() != shape.as_slice() => out.push(Violation::Shape {
                    name: name.clone(),
                    expected: shape.clone(),
                    actual: t.shape().to_vec(),
                }),
                Some(_) => {}
            }
        }
        let known: std::collections::BTreeSet<&str> = expected.iter().map(|(n, _)| n.as_str()).collect();
        for name in self.tensors.keys() {
            if !known.contains(name.as_str()) {
                out.push(Violation::Unexpected(name.clone()));
            }
        }
        out
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            return Ok(());
        }
        let msg: Vec<String> = v.iter().map(|v| v.to_string()).collect();
        Err(Error::invalid(format!(
            "checkpoint is inconsistent: {}",
            msg.join("; ")
        )))
    }

    pub fn num_params(&self) -> u64 {
        self.tensors.values().map(|t| t.numel() as u64).sum()
    }

    /// Tensors in canonical order, followed by any unexpected names.
    pub fn ordered(&self) -> Vec<(&str, &Tensor)> {
        let mut out = Vec::with_capacity(self.tensors.len());
        let mut used = std::collections::BTreeSet::new();
        for (name, _) in expected_tensors(&self.config) {
            if let Some((k, t)) = self.tensors.get_key_value(&name) {
                out.push((k.as_str(), t));
                used.insert(k.as_str());
            }
        }
        for (k, t) in &self.tensors {
            if !used.contains(k.as_str()) {
                out.push((k.as_str(), t));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = serde_json::to_value(&self.config)?;
        format::encode(KIND, &config, &self.ordered(), &self.meta)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = format::decode(bytes)?;
        Self::from_container(c, KIND)
    }

    pub(crate) fn from_container(c: format::Container, kind: &str) -> Result<Self> {
        if c.kind != kind {
            return Err(Error::format(format!("expected a {kind} file, found {}", c.kind)));
        }
        let config: ModelConfig = serde_json::from_value(c.config)?;
        Ok(Self {
            config,
            tensors: c.tensors.into_iter().collect(),
            meta: c.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    /// SHA-256 over config and weights only, ignoring meta.
    pub fn weights_digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config)?);
        for (name, t) in self.ordered() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}
