#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = compresslab::format::decode(data) {
        let refs: Vec<(&str, &compresslab::Tensor)> = c.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let again = compresslab::format::encode(&c.kind, &c.config, &refs, &c.meta).unwrap();
        assert!(compresslab::format::decode(&again).is_ok());
    }
});
