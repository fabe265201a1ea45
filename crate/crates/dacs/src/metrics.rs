//! Scoring for steering interactions: keyword accuracy, wrong-agent
//! contamination, context size, judge-verdict parsing, and Cohen's kappa.
//!
//! Keyword matching is case-insensitive and whole-word (or whole-phrase):
//! an occurrence counts only when the characters on both sides are not
//! alphanumeric, so "set" never matches inside "settle". This is stricter
//! than a plain substring check on purpose; generic terms surface naturally
//! in prose and a substring matcher would inflate contamination.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::TokenCount;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("cannot summarize an empty trial")]
    EmptyTrial,
    #[error("no well-formed <verdict> tag in judge output")]
    VerdictMissing,
    #[error("kappa undefined: expected agreement is degenerate")]
    KappaUndefined,
}

/// Per-interaction scores: was the steering answer on target, did it leak
/// another agent's vocabulary, and how large was the prompt that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionScore {
    pub agent_id: String,
    pub accurate: bool,
    pub contaminated: bool,
    pub context_tokens: TokenCount,
    pub step: u64,
}

/// Judge decision extracted from free-form judge output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Correct,
    Incorrect,
}

/// 2x2 agreement counts between the judge and the keyword scorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgreementTable {
    pub both_correct: u64,
    pub judge_only: u64,
    pub keyword_only: u64,
    pub both_incorrect: u64,
}

impl AgreementTable {
    pub fn new(both_correct: u64, judge_only: u64, keyword_only: u64, both_incorrect: u64) -> Self {
        Self {
            both_correct,
            judge_only,
            keyword_only,
            both_incorrect,
        }
    }

    pub fn total(&self) -> u64 {
        self.both_correct + self.judge_only + self.keyword_only + self.both_incorrect
    }
}

/// True when `keyword` occurs in `text` as a whole word or phrase,
/// ignoring letter case. Empty keywords never match.
pub fn contains_keyword(text: &str, keyword: &str) -> bool {
    keyword_match_count(text, keyword) > 0
}

/// Number of non-overlapping whole-word occurrences of `keyword` in `text`,
/// ignoring letter case.
pub fn keyword_match_count(text: &str, keyword: &str) -> usize {
    if keyword.is_empty() {
        return 0;
    }
    let folded_text = text.to_lowercase();
    let folded_kw = keyword.to_lowercase();
    let mut count = 0;
    for (start, _) in folded_text.match_indices(&folded_kw) {
        let before_ok = folded_text[..start]
            .chars()
            .next_back()
            .is_none_or(|c| !c.is_alphanumeric());
        let after_ok = folded_text[start + folded_kw.len()..]
            .chars()
            .next()
            .is_none_or(|c| !c.is_alphanumeric());
        if before_ok && after_ok {
            count += 1;
        }
    }
    count
}

/// True when the response contains at least one expected keyword.
pub fn score_accuracy<S: AsRef<str>>(response: &str, expected: &[S]) -> bool {
    debug_assert!(!expected.is_empty(), "expected keyword list must be non-empty");
    expected
        .iter()
        .any(|k| contains_keyword(response, k.as_ref()))
}

/// True when the response contains any keyword belonging to another agent.
/// The map must already exclude the target agent.
pub fn score_contamination(response: &str, others_keywords: &BTreeMap<String, Vec<String>>) -> bool {
    others_keywords
        .values()
        .flatten()
        .any(|k| contains_keyword(response, k))
}

/// Mean accuracy, mean contamination, and mean prompt size over one trial.
pub fn trial_summary(scores: &[InteractionScore]) -> Result<(f64, f64, f64), MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::EmptyTrial);
    }
    debug_assert!(
        scores.iter().all(|s| s.context_tokens > TokenCount::ZERO),
        "scored interactions must have been built from a non-empty prompt"
    );
    let n = scores.len() as f64;
    let accurate = scores.iter().filter(|s| s.accurate).count() as f64;
    let contaminated = scores.iter().filter(|s| s.contaminated).count() as f64;
    let tokens: usize = scores.iter().map(|s| s.context_tokens.get()).sum();
    Ok((accurate / n, contaminated / n, tokens as f64 / n))
}

/// Extract the first well-formed `<verdict>...</verdict>` tag from judge
/// output. The inner token may carry surrounding whitespace and any letter
/// case; malformed tags are skipped in favor of a later well-formed one.
pub fn parse_verdict(judge_output: &str) -> Result<Verdict, MetricsError> {
    const OPEN: &str = "<verdict>";
    const CLOSE: &str = "</verdict>";
    let mut rest = judge_output;
    while let Some(open_at) = rest.find(OPEN) {
        let after_open = &rest[open_at + OPEN.len()..];
        if let Some(close_at) = after_open.find(CLOSE) {
            let inner = after_open[..close_at].trim();
            if inner.eq_ignore_ascii_case("CORRECT") {
                return Ok(Verdict::Correct);
            }
            if inner.eq_ignore_ascii_case("INCORRECT") {
                return Ok(Verdict::Incorrect);
            }
        }
        rest = after_open;
    }
    Err(MetricsError::VerdictMissing)
}

/// Cohen's kappa over a 2x2 agreement table, computed in integer arithmetic
/// so rational results like 4000/5000 come out as exact doubles.
pub fn cohen_kappa(table: &AgreementTable) -> Result<f64, MetricsError> {
    let total = table.total();
    if total == 0 {
        return Err(MetricsError::KappaUndefined);
    }
    let t = i128::from(total);
    let judge_correct = i128::from(table.both_correct + table.judge_only);
    let keyword_correct = i128::from(table.both_correct + table.keyword_only);
    let judge_incorrect = t - judge_correct;
    let keyword_incorrect = t - keyword_correct;
    // Expected-agreement numerator over total^2.
    let expected = judge_correct * keyword_correct + judge_incorrect * keyword_incorrect;
    let denominator = t * t - expected;
    if denominator == 0 {
        return Err(MetricsError::KappaUndefined);
    }
    let observed = i128::from(table.both_correct + table.both_incorrect) * t;
    Ok((observed - expected) as f64 / denominator as f64)
}
