//! Fuzz the judge verdict parser: never panic, and a successful parse
//! implies a verdict tag really was present (case-insensitively).

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if dacs::metrics::parse_verdict(text).is_ok() {
            assert!(text.to_lowercase().contains("<verdict>"));
        }
    }
});
