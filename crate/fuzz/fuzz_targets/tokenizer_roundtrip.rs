//! Fuzz the tokenizer pair: counting never panics on any UTF-8, and
//! truncation always returns an in-budget prefix that is the identity
//! whenever the text already fits.

#![no_main]

use dacs::tokenizer::{count_tokens, truncate_to, TokenCount};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let total = count_tokens(text);
        for budget in [0, 1, 2, 7, total.get(), total.get() + 3] {
            let budget = TokenCount(budget);
            let prefix = truncate_to(text, budget);
            assert!(text.starts_with(prefix));
            assert!(count_tokens(prefix) <= budget);
            if total <= budget {
                assert_eq!(prefix, text);
            }
        }
    }
});
