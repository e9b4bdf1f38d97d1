use crate::error::{Error, Result};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const NUM_SPECIAL: u32 = 2;
/// 256 byte values plus the specials.
pub const VOCAB_SIZE: usize = 256 + NUM_SPECIAL as usize;

/// Byte-level tokenization: id = byte + number of specials.
pub fn tokenize(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| b as u32 + NUM_SPECIAL).collect()
}

/// Inverse of [`tokenize`]; special tokens carry no bytes and are skipped.
pub fn detokenize(ids: &[u32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        match id {
            BOS | EOS => {}
            _ if (id as usize) < VOCAB_SIZE => out.push((id - NUM_SPECIAL) as u8),
            _ => return Err(Error::invalid(format!("token id {id} is not a byte token"))),
        }
    }
    Ok(out)
}
