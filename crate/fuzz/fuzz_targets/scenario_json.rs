//! Fuzz the scenario JSON loader: arbitrary bytes must never panic, and
//! anything that parses must survive a serialize/reparse round trip.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(scenario) = dacs::agents::parse_scenario(text, "fuzz") {
            let json = serde_json::to_string(&scenario).expect("reserialize");
            let again = dacs::agents::parse_scenario(&json, "fuzz").expect("reparse");
            assert_eq!(scenario, again);
        }
    }
});
