use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Telemetry {
    pub records: Vec<StepRecord>,
}

impl Telemetry {
    pub fn push(&mut self, r: StepRecord) -> Result<()> {
        let expected = self.records.last().map_or(0, |p| p.step + 1);
        if r.step != expected {
            return Err(Error::InvalidState(format!(
                "step {} recorded after {}",
                r.step,
                expected as i64 - 1
            )));
        }
        self.records.push(r);
        Ok(())
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// Means of consecutive non-overlapping `window`-step blocks of the
    /// first `limit` steps; a trailing partial block is dropped.
    pub fn smoothed(&self, window: usize, limit: usize) -> Vec<f64> {
        if window == 0 {
            return Vec::new();
        }
        let n = self.records.len().min(limit);
        self.records[..n]
            .chunks_exact(window)
            .map(|c| c.iter().map(|r| r.loss).sum::<f64>() / window as f64)
            .collect()
    }

    /// SHA-256 over everything except wall-clock times.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.records {
            h.update((r.step as u64).to_le_bytes());
            h.update(r.lr.to_bits().to_le_bytes());
            h.update(r.loss.to_bits().to_le_bytes());
            h.update(r.grad_norm.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(["step", "lr", "loss", "grad_norm", "wall_ms"])
            .map_err(|e| Error::format(e.to_string()))?;
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::format(e.to_string()))
    }

    /// Parses telemetry written by [`Telemetry::to_csv`]; steps must be
    /// contiguous from 0 and every value finite except a diverged loss.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let headers = rd.headers().map_err(|e| Error::format(e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["step", "lr", "loss", "grad_norm", "wall_ms"] {
            return Err(Error::format(format!("unexpected telemetry columns {headers:?}")));
        }
        let mut t = Telemetry::default();
        for row in rd.deserialize() {
            let r: StepRecord = row.map_err(|e| Error::format(e.to_string()))?;
            if !r.lr.is_finite() || !r.grad_norm.is_finite() || !r.wall_ms.is_finite() {
                return Err(Error::format(format!("non-finite field at step {}", r.step)));
            }
            t.push(r).map_err(|e| Error::format(e.to_string()))?;
        }
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}
