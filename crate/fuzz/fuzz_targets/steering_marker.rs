//! Fuzz the bracket-marker grammar: never panic, and any extracted event
//! must be traceable back to literal marker text in the input.

#![no_main]

use dacs::agents::MarkerEvent;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        match dacs::agents::extract_marker(text) {
            Ok(MarkerEvent::Steer(question)) => {
                assert!(text.contains("[[STEER:"));
                assert!(!question.contains("]]"));
            }
            Ok(MarkerEvent::Done) => assert!(text.contains("[[DONE]]")),
            Ok(MarkerEvent::None) | Err(_) => {}
        }
    }
});
