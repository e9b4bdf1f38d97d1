#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let ids: Vec<u32> = data
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
        .collect();
    if let Ok(bytes) = compresslab::data::detokenize(&ids) {
        assert!(bytes.len() <= ids.len());
    }
});
