//! Binary tensor container shared by checkpoints and run states.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, a JSON header,
//! then the raw little-endian `f32` payload of every tensor in directory
//! order with no padding.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CLABTNS1";

/// Refuse headers larger than this while decoding.
pub const MAX_HEADER_BYTES: u64 = 64 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    config: serde_json::Value,
    tensors: Vec<DirEntry>,
    meta: BTreeMap<String, String>,
}

/// Decoded container contents.
#[derive(Clone, Debug)]
pub struct Container {
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
    pub meta: BTreeMap<String, String>,
}

pub fn encode(
    kind: &str,
    config: &serde_json::Value,
    tensors: &[(&str, &Tensor)],
    meta: &BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    let mut dir = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        let length = 4 * t.numel() as u64;
        dir.push(DirEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            length,
        });
        offset += length;
    }
    let header = serde_json::to_vec(&Header {
        kind: kind.to_string(),
        config: config.clone(),
        tensors: dir,
        meta: meta.clone(),
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::format("not a tensor container (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    if hlen > MAX_HEADER_BYTES || hlen > (bytes.len() - 16) as u64 {
        return Err(Error::format(format!("header length {hlen} out of bounds")));
    }
    let body = 16 + hlen as usize;
    let header: Header = serde_json::from_slice(&bytes[16..body])?;
    let payload = &bytes[body..];

    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut seen = std::collections::BTreeSet::new();
    let mut cursor = 0u64;
    for e in header.tensors {
        if !seen.insert(e.name.clone()) {
            return Err(Error::format(format!("duplicate tensor {}", e.name)));
        }
        let numel = e
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| Error::format(format!("tensor {} shape overflows", e.name)))?;
        let want = numel
            .checked_mul(4)
            .ok_or_else(|| Error::format(format!("tensor {} too large", e.name)))?;
        if e.length != want {
            return Err(Error::format(format!(
                "tensor {} declares {} bytes, shape needs {want}",
                e.name, e.length
            )));
        }
        if e.offset != cursor {
            return Err(Error::format(format!(
                "tensor {} at offset {}, expected {cursor}",
                e.name, e.offset
            )));
        }
        let end = cursor
            .checked_add(e.length)
            .filter(|&end| end <= payload.len() as u64)
            .ok_or_else(|| Error::format(format!("tensor {} runs past end of file", e.name)))?;
        let raw = &payload[cursor as usize..end as usize];
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((e.name, Tensor::new(e.shape, data)?));
        cursor = end;
    }
    if cursor != payload.len() as u64 {
        return Err(Error::format(format!(
            "{} trailing payload bytes",
            payload.len() as u64 - cursor
        )));
    }
    Ok(Container {
        kind: header.kind,
        config: header.config,
        tensors,
        meta: header.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        let a = Tensor::new(vec![2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap();
        let b = Tensor::from_vec(vec![7.0]);
        let mut meta = BTreeMap::new();
        meta.insert("seed".into(), "3".into());
        encode("test", &serde_json::json!({"x": 1}), &[("a", &a), ("b", &b)], &meta).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let bytes = sample();
        let c = decode(&bytes).unwrap();
        assert_eq!(c.kind, "test");
        assert_eq!(c.tensors.len(), 2);
        assert_eq!(c.tensors[0].1.data()[1].to_bits(), (-0.0f32).to_bits());
        let names: Vec<&str> = c.tensors.iter().map(|(n, _)| n.as_str()).collect();
        let refs: Vec<(&str, &Tensor)> = names.iter().copied().zip(c.tensors.iter().map(|(_, t)| t)).collect();
        assert_eq!(encode(&c.kind, &c.config, &refs, &c.meta).unwrap(), bytes);
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        let bytes = sample();
        for cut in [0, 7, 15, 20, bytes.len() - 1] {
            assert!(decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode(&long).is_err());
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = sample();
        bytes[0] ^= 1;
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }
}
