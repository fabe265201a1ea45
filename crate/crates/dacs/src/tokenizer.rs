//! Deterministic token counting and budget truncation.
//!
//! Every budget decision in the crate goes through one token rule so that
//! counts are reproducible across runs and platforms: text splits on
//! whitespace, each maximal alphanumeric run is one token, and every other
//! non-whitespace character is a token by itself. `"BFS, DFS?"` is four
//! tokens. A live deployment can swap in a provider tokenizer by
//! implementing [`Tokenizer`]; nothing else in the crate changes.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Range};

use serde::{Deserialize, Serialize};

/// Non-negative token count. Wraps `usize` so counts are not confused with
/// byte lengths or tick numbers in signatures.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct TokenCount(pub usize);

impl TokenCount {
    pub const ZERO: TokenCount = TokenCount(0);

    pub fn get(self) -> usize {
        self.0
    }

    pub fn saturating_sub(self, rhs: TokenCount) -> TokenCount {
        TokenCount(self.0.saturating_sub(rhs.0))
    }
}

impl fmt::Display for TokenCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl From<usize> for TokenCount {
    fn from(n: usize) -> Self {
        TokenCount(n)
    }
}

impl Add for TokenCount {
    type Output = TokenCount;
    fn add(self, rhs: TokenCount) -> TokenCount {
        TokenCount(self.0 + rhs.0)
    }
}

impl AddAssign for TokenCount {
    fn add_assign(&mut self, rhs: TokenCount) {
        self.0 += rhs.0;
    }
}

impl Sum for TokenCount {
    fn sum<I: Iterator<Item = TokenCount>>(iter: I) -> TokenCount {
        TokenCount(iter.map(|c| c.0).sum())
    }
}

/// Pluggable token rule. Implementations must be deterministic: equal input
/// yields equal spans. Spans are byte ranges into the input, strictly
/// increasing and non-overlapping.
pub trait Tokenizer {
    /// Byte ranges of each token, in text order.
    fn token_spans(&self, text: &str) -> Vec<Range<usize>>;

    fn count(&self, text: &str) -> TokenCount {
        TokenCount(self.token_spans(text).len())
    }

    /// Longest prefix of `text` ending on a token boundary whose count is
    /// at most `budget`. The full text comes back untouched when it already
    /// fits; no ellipsis or suffix marker is added.
    fn truncate<'t>(&self, text: &'t str, budget: TokenCount) -> &'t str {
        let spans = self.token_spans(text);
        if spans.len() <= budget.0 {
            return text;
        }
        if budget.0 == 0 {
            return "";
        }
        &text[..spans[budget.0 - 1].end]
    }
}

/// The default rule: whitespace separates, alphanumeric runs are single
/// tokens, every other character stands alone.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleTokenizer;

impl Tokenizer for RuleTokenizer {
    fn token_spans(&self, text: &str) -> Vec<Range<usize>> {
        let mut spans = Vec::new();
        let mut run_start: Option<usize> = None;
        for (i, ch) in text.char_indices() {
            if ch.is_alphanumeric() {
                if run_start.is_none() {
                    run_start = Some(i);
                }
            } else {
                if let Some(start) = run_start.take() {
                    spans.push(start..i);
                }
                if !ch.is_whitespace() {
                    spans.push(i..i + ch.len_utf8());
                }
            }
        }
        if let Some(start) = run_start {
            spans.push(start..text.len());
        }
        spans
    }
}

/// Token count of `text` under the default rule.
pub fn count_tokens(text: &str) -> TokenCount {
    RuleTokenizer.count(text)
}

/// Budget truncation of `text` under the default rule. See
/// [`Tokenizer::truncate`].
pub fn truncate_to(text: &str, budget: TokenCount) -> &str {
    RuleTokenizer.truncate(text, budget)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn counts_words_and_punctuation() {
        assert_eq!(count_tokens("BFS, DFS?"), TokenCount(4));
        assert_eq!(count_tokens(""), TokenCount(0));
        assert_eq!(count_tokens("   \t\n"), TokenCount(0));
        assert_eq!(count_tokens("hello"), TokenCount(1));
        assert_eq!(count_tokens("a2: RUNNING"), TokenCount(3));
        assert_eq!(count_tokens("3/5 steps done"), TokenCount(5));
        assert_eq!(count_tokens("UTF-8"), TokenCount(3));
    }

    #[test]
    fn counts_unicode_runs() {
        // Alphanumeric is the Unicode class, so words in other scripts are
        // single tokens too.
        assert_eq!(count_tokens("naïve café"), TokenCount(2));
        assert_eq!(count_tokens("δx=1"), TokenCount(3));
    }

    #[test]
    fn truncates_on_token_boundaries() {
        assert_eq!(truncate_to("a b c", TokenCount(2)), "a b");
        assert_eq!(truncate_to("", TokenCount(5)), "");
        assert_eq!(truncate_to("x y z", TokenCount(99)), "x y z");
        assert_eq!(truncate_to("a b c", TokenCount(0)), "");
        assert_eq!(truncate_to("one, two", TokenCount(2)), "one,");
    }

    #[test]
    fn truncate_keeps_whole_text_at_exact_budget() {
        let text = "alpha beta gamma";
        assert_eq!(truncate_to(text, count_tokens(text)), text);
    }

    fn arb_text() -> impl Strategy<Value = String> {
        // Mix of words, punctuation, unicode and whitespace.
        proptest::string::string_regex("([a-zA-Z0-9]{1,8}|[.,;:!?\\[\\]=/-]|[ \\t\\n]|é|ß){0,64}")
            .unwrap()
    }

    proptest! {
        #[test]
        fn empty_only_when_no_tokens(text in arb_text()) {
            let is_blank = text.chars().all(|c| c.is_whitespace());
            prop_assert_eq!(count_tokens(&text) == TokenCount(0), is_blank);
        }

        #[test]
        fn truncation_respects_budget(text in arb_text(), budget in 0usize..32) {
            let cut = truncate_to(&text, TokenCount(budget));
            prop_assert!(count_tokens(cut).0 <= budget);
        }

        #[test]
        fn truncation_is_idempotent(text in arb_text(), budget in 0usize..32) {
            let once = truncate_to(&text, TokenCount(budget));
            let twice = truncate_to(once, TokenCount(budget));
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn truncation_is_prefix_monotone(text in arb_text(), b1 in 0usize..32, b2 in 0usize..32) {
            let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
            let small = truncate_to(&text, TokenCount(lo));
            let large = truncate_to(&text, TokenCount(hi));
            prop_assert!(large.starts_with(small));
        }

        #[test]
        fn whitespace_join_is_additive(a in arb_text(), b in arb_text()) {
            let joined = format!("{a}\n{b}");
            prop_assert_eq!(count_tokens(&joined), count_tokens(&a) + count_tokens(&b));
        }

        #[test]
        fn spans_tile_the_tokens(text in arb_text()) {
            let spans = RuleTokenizer.token_spans(&text);
            let mut prev_end = 0;
            for s in &spans {
                prop_assert!(s.start >= prev_end);
                prop_assert!(s.end > s.start);
                prev_end = s.end;
            }
            prop_assert_eq!(spans.len(), count_tokens(&text).0);
        }
    }
}
