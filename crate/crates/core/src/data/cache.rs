//! Calibration batch cache: magic, `u64` header length, JSON header
//! (n, seq_len, seed, corpus digest, window offsets), then `u32` token ids.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CalibrationBatch, WindowOffset};
use crate::error::{Error, Result};
use crate::format::MAX_HEADER_BYTES;
use crate::model::TokenBatch;

pub const MAGIC: &[u8; 8] = b"CLABBAT1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    n: usize,
    seq_len: usize,
    seed: u64,
    corpus_digest: String,
    offsets: Vec<WindowOffset>,
}

pub fn encode_batch_cache(batch: &CalibrationBatch, corpus_digest: &str) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        n: batch.tokens.batch(),
        seq_len: batch.tokens.seq_len(),
        seed: batch.seed,
        corpus_digest: corpus_digest.to_string(),
        offsets: batch.offsets.clone(),
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + 4 * batch.tokens.ids().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for id in batch.tokens.ids() {
        out.extend_from_slice(&id.to_le_bytes());
    }
    Ok(out)
}

/// Decodes a cache file, returning the batch and the recorded corpus digest.
pub fn decode_batch_cache(bytes: &[u8]) -> Result<(CalibrationBatch, String)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::format("not a batch cache (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    if hlen > MAX_HEADER_BYTES || hlen > (bytes.len() - 16) as u64 {
        return Err(Error::format(format!("header length {hlen} out of bounds")));
    }
    let body = 16 + hlen as usize;
    let h: Header = serde_json::from_slice(&bytes[16..body])?;
    let payload = &bytes[body..];
    let want =
        h.n.checked_mul(h.seq_len)
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| Error::format("batch dimensions overflow"))?;
    if payload.len() != want {
        return Err(Error::format(format!(
            "payload holds {} bytes, header implies {want}",
            payload.len()
        )));
    }
    if h.offsets.len() != h.n {
        return Err(Error::format("offset count differs from row count"));
    }
    let ids = payload
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let batch = CalibrationBatch {
        tokens: TokenBatch::new(h.n, h.seq_len, ids)?,
        seed: h.seed,
        offsets: h.offsets,
    };
    Ok((batch, h.corpus_digest))
}

pub fn save_batch_cache(path: &Path, batch: &CalibrationBatch, corpus_digest: &str) -> Result<()> {
    std::fs::write(path, encode_batch_cache(batch, corpus_digest)?)?;
    Ok(())
}

/// Loads a cache and refuses it when it was drawn from a different corpus.
pub fn load_batch_cache(path: &Path, corpus_digest: &str) -> Result<CalibrationBatch> {
    let (batch, digest) = decode_batch_cache(&std::fs::read(path)?)?;
    if digest != corpus_digest {
        return Err(Error::invalid(format!(
            "batch cache {} was drawn from another corpus",
            path.display()
        )));
    }
    Ok(batch)
}
