#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(spec) = compresslab::surgery::PruneSpec::from_toml(text) {
            let back = compresslab::surgery::PruneSpec::from_toml(&spec.to_toml().unwrap()).unwrap();
            assert_eq!(back, spec);
        }
    }
});
