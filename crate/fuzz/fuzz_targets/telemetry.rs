#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(t) = compresslab::distill::Telemetry::from_csv(text) {
            assert_eq!(
                compresslab::distill::Telemetry::from_csv(&t.to_csv().unwrap()).unwrap(),
                t
            );
        }
    }
});
