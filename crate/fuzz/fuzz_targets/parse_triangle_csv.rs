#![no_main]

use ere_core::csvio::read_triangle_csv;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|src: &str| {
    if let Ok(rows) = read_triangle_csv(src) {
        assert!(rows.iter().all(|r| 0.0 <= r.t && r.t <= r.s));
    }
});
