#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(grid) = compresslab::surgery::CandidateGrid::from_toml(text) {
            let _ = compresslab::surgery::enumerate_candidates(&grid.base, &grid);
        }
    }
});
