use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{count_params, fit_embedding_mass, param_breakdown, predict_params, ModelConfig};

/// One grid row; unset fields inherit the base model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridRow {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intermediate: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
}

/// Pruning scenarios over a base model. When `reported_base_total` is set,
/// totals use the embedding mass fitted from it instead of the vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateGrid {
    pub base: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reported_base_total: Option<f64>,
    pub rows: Vec<GridRow>,
}

impl CandidateGrid {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

/// Target geometry of one grid row with its predicted size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub config: ModelConfig,
    pub predicted_params: f64,
    pub base_params: f64,
    pub reduction_pct: f64,
}

pub fn row_config(base: &ModelConfig, row: &GridRow) -> Result<ModelConfig> {
    let mut c = base.clone();
    if let Some(h) = row.hidden {
        if h > base.hidden_size {
            return Err(Error::invalid(format!("{}: hidden {h} exceeds base", row.id)));
        }
        c.hidden_size = h;
    }
    if let Some(i) = row.intermediate {
        if i > base.intermediate_size {
            return Err(Error::invalid(format!("{}: intermediate {i} exceeds base", row.id)));
        }
        c.intermediate_size = i;
    }
    if let Some(l) = row.layers {
        if l > base.num_layers {
            return Err(Error::invalid(format!("{}: layers {l} exceeds base", row.id)));
        }
        c.num_layers = l;
    }
    c.validate().map_err(|e| Error::invalid(format!("{}: {e}", row.id)))?;
    Ok(c)
}

/// Predicted totals and reductions for every grid row. With a fitted
/// embedding mass, rows that shrink the hidden size scale that mass by the
/// hidden ratio (embeddings are `vocab x hidden`).
pub fn enumerate_candidates(base: &ModelConfig, grid: &CandidateGrid) -> Result<Vec<Candidate>> {
    let fitted = grid
        .reported_base_total
        .map(|t| fit_embedding_mass(base, t))
        .transpose()?;
    let total = |c: &ModelConfig| -> Result<f64> {
        match fitted {
            Some(e) => predict_params(c, e * c.hidden_size as f64 / base.hidden_size as f64),
            None => Ok(count_params(c)? as f64),
        }
    };
    let base_params = total(base)?;
    grid.rows
        .iter()
        .map(|row| {
            let config = row_config(base, row)?;
            let predicted = total(&config)?;
            Ok(Candidate {
                id: row.id.clone(),
                predicted_params: predicted,
                base_params,
                reduction_pct: 100.0 * (1.0 - predicted / base_params),
                config,
            })
        })
        .collect()
}

/// Per-layer parameter count, exposed for reporting.
pub fn per_layer_params(cfg: &ModelConfig) -> Result<u64> {
    Ok(param_breakdown(cfg)?.per_layer())
}
