#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(records) = harness::parse_report(text) {
            if !records.is_empty() {
                let _ = harness::cmd_report(&records);
            }
        }
    }
});
