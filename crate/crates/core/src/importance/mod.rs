//! Importance estimation: weight-level baselines (magnitude, Wanda,
//! SparseGPT), Block Influence for depth, activation statistics for
//! hidden/FFN/head width, and first-order Taylor group scores.

mod activations;
mod sparsegpt;
mod taylor;
mod weights;

pub use activations::*;
pub use sparsegpt::{
    damped_inverse_hessian, exhaustive_prune_errors, reconstruction_error, sparsegpt_prune, SparseGptResult, DAMP,
};
pub use taylor::*;
pub use weights::*;

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TokenBatch};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Magnitude,
    Wanda,
    Sparsegpt,
    BlockInfluence,
    Taylor,
    MinitronHidden,
    MinitronFfn,
    MinitronHead,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Weight,
    Neuron,
    Head,
    Layer,
}

/// Scores from one method plus digests of the data and model they came from.
///
/// Shapes: `[layers]` for block influence, `[hidden]` for hidden channels,
/// `[layers, intermediate]` for FFN channels, `[layers, heads]` for heads
/// and the weight shape for weight-level methods.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportanceReport {
    pub method: Method,
    pub axis: Axis,
    pub scores: Tensor,
    pub calib_digest: String,
    pub config_digest: String,
}

impl ImportanceReport {
    pub fn new(
        method: Method,
        axis: Axis,
        scores: Tensor,
        calib_digest: String,
        config_digest: String,
    ) -> Result<Self> {
        let r = Self {
            method,
            axis,
            scores,
            calib_digest,
            config_digest,
        };
        r.check()?;
        Ok(r)
    }

    fn check(&self) -> Result<()> {
        if self.scores.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("importance scores must be finite"));
        }
        let bad = match self.method {
            Method::BlockInfluence => self.scores.data().iter().any(|&v| !(0.0..=2.0).contains(&v)),
            Method::Sparsegpt => false,
            _ => self.scores.data().iter().any(|&v| v < 0.0),
        };
        if bad {
            return Err(Error::invalid(format!("scores out of range for {:?}", self.method)));
        }
        Ok(())
    }

    /// Row `i` of a 2-D score table.
    pub fn row(&self, i: usize) -> Result<&[f32]> {
        let (r, _) = self.scores.dims2()?;
        if i >= r {
            return Err(Error::invalid(format!("report has {r} rows, asked for {i}")));
        }
        Ok(self.scores.row(i))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        r.check().map_err(|e| Error::format(e.to_string()))?;
        Ok(r)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// SHA-256 of the token ids, hex encoded.
pub fn tokens_digest(tokens: &TokenBatch) -> String {
    let mut h = Sha256::new();
    h.update((tokens.batch() as u64).to_le_bytes());
    h.update((tokens.seq_len() as u64).to_le_bytes());
    for id in tokens.ids() {
        h.update(id.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn config_digest(cfg: &ModelConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(bytes))
}

/// Packs per-layer score rows into a `[rows, width]` tensor.
pub fn table(rows: &[Vec<f64>]) -> Result<Tensor> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::invalid("ragged score table"));
    }
    Tensor::new(
        vec![rows.len(), width],
        rows.iter().flatten().map(|&v| v as f32).collect(),
    )
}
