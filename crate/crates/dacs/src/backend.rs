//! The model-call boundary.
//!
//! Two deterministic mocks make pipeline properties testable without a live
//! model: the oracle always answers the steering directive's target agent
//! with that agent's currently-expected keyword, and the contaminator is a
//! toy model of attention capture. It counts every scenario keyword in the
//! prompt, attributes the counts to the owning agents, and answers for
//! whichever agent holds the most token mass, regardless of who the
//! directive names. A real chat-completion client sits behind the same
//! trait for live runs.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::BuiltContext;
use crate::metrics::keyword_match_count;
use crate::tokenizer::TokenCount;

pub const API_KEY_ENV: &str = "DACS_API_KEY";
pub const ENDPOINT_ENV: &str = "DACS_ENDPOINT";
pub const DEFAULT_ENDPOINT: &str = "https://openrouter.ai/api/v1/chat/completions";

const SYSTEM_PROMPT: &str = "You are a steering assistant embedded in a multi-agent \
orchestrator. Answer the final steering directive or user message in one short paragraph.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BackendKind {
    MockOracle,
    MockContaminator,
    Http,
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackendKind::MockOracle => "mock-oracle",
            BackendKind::MockContaminator => "mock-contaminator",
            BackendKind::Http => "http",
        })
    }
}

impl std::str::FromStr for BackendKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mock-oracle" => Ok(BackendKind::MockOracle),
            "mock-contaminator" => Ok(BackendKind::MockContaminator),
            "http" => Ok(BackendKind::Http),
            other => Err(format!(
                "unknown backend {other:?} (expected mock-oracle, mock-contaminator, or http)"
            )),
        }
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("prompt violates the steering protocol: {reason}")]
    ProtocolViolation { reason: String },
    #[error("backend unavailable: {reason}")]
    BackendUnavailable { reason: String },
    #[error("missing API key: set {API_KEY_ENV}")]
    MissingApiKey,
}

/// Model metadata attached to every completion call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub model_name: String,
    pub max_output_tokens: TokenCount,
    pub temperature: f64,
    /// Chat-completion URL; only meaningful for the HTTP backend.
    pub endpoint: Option<String>,
}

impl Default for CompletionParams {
    fn default() -> Self {
        Self {
            model_name: "mock".to_string(),
            max_output_tokens: TokenCount(1024),
            temperature: 0.0,
            endpoint: None,
        }
    }
}

/// The keyword table the mocks answer from: per agent, the full keyword
/// vocabulary across the whole scenario, and the currently-expected keyword
/// list which the harness updates as decision points fire.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScenarioVocab {
    all: BTreeMap<String, Vec<String>>,
    current: BTreeMap<String, Vec<String>>,
}

impl ScenarioVocab {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register an agent with its scenario-wide keyword list.
    pub fn insert_agent(&mut self, agent_id: &str, all_keywords: Vec<String>) {
        self.all.insert(agent_id.to_string(), all_keywords);
        self.current.entry(agent_id.to_string()).or_default();
    }

    /// Replace the currently-expected keywords for one agent.
    pub fn set_current(&mut self, agent_id: &str, keywords: Vec<String>) {
        self.current.insert(agent_id.to_string(), keywords);
    }

    /// First currently-expected keyword for the agent, if any.
    pub fn current_primary(&self, agent_id: &str) -> Option<&str> {
        self.current
            .get(agent_id)
            .and_then(|ks| ks.first())
            .map(String::as_str)
    }

    pub fn all_keywords(&self) -> &BTreeMap<String, Vec<String>> {
        &self.all
    }

    /// Scenario-wide keywords of every agent except `target`; the shape the
    /// contamination scorer consumes.
    pub fn others_keywords(&self, target: &str) -> BTreeMap<String, Vec<String>> {
        self.all
            .iter()
            .filter(|(id, _)| id.as_str() != target)
            .map(|(id, ks)| (id.clone(), ks.clone()))
            .collect()
    }
}

pub trait Backend: Send + Sync {
    fn kind(&self) -> BackendKind;

    /// Produce the model's answer to an assembled prompt. Deterministic for
    /// the mocks: identical (prompt, params, vocab) give identical text.
    fn complete(
        &self,
        prompt: &BuiltContext,
        params: &CompletionParams,
        vocab: &ScenarioVocab,
    ) -> Result<String, BackendError>;
}

/// Last steering directive named in the prompt, if any.
fn directive_target(text: &str) -> Option<&str> {
    text.lines()
        .rev()
        .find_map(|line| line.strip_prefix("STEER TARGET: "))
}

fn has_user_message(text: &str) -> bool {
    text.lines().any(|line| line.starts_with("USER MESSAGE: "))
}

fn answer_sentence(keyword: &str) -> String {
    format!("Use {keyword} for this step.")
}

/// Mock that always answers the directive's target with that agent's
/// currently-expected keyword. User messages get a keyword-free
/// acknowledgement.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockOracle;

impl Backend for MockOracle {
    fn kind(&self) -> BackendKind {
        BackendKind::MockOracle
    }

    fn complete(
        &self,
        prompt: &BuiltContext,
        _params: &CompletionParams,
        vocab: &ScenarioVocab,
    ) -> Result<String, BackendError> {
        if let Some(target) = directive_target(&prompt.full_text) {
            let keyword = vocab.current_primary(target).ok_or_else(|| {
                BackendError::ProtocolViolation {
                    reason: format!("directive targets unknown agent {target}"),
                }
            })?;
            return Ok(answer_sentence(keyword));
        }
        if has_user_message(&prompt.full_text) {
            return Ok("Acknowledged: decisions resolved.".to_string());
        }
        Err(BackendError::ProtocolViolation {
            reason: "prompt carries neither a steering directive nor a user message".to_string(),
        })
    }
}

/// Mock that ignores the directive and answers for whichever agent's
/// vocabulary dominates the prompt by whole-word count. Ties go to the
/// lexicographically smaller agent id; a topmost keyword tie goes to list
/// order; an all-zero count falls back to the first agent's first keyword.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockContaminator;

impl Backend for MockContaminator {
    fn kind(&self) -> BackendKind {
        BackendKind::MockContaminator
    }

    fn complete(
        &self,
        prompt: &BuiltContext,
        _params: &CompletionParams,
        vocab: &ScenarioVocab,
    ) -> Result<String, BackendError> {
        if directive_target(&prompt.full_text).is_none() && has_user_message(&prompt.full_text) {
            return Ok("Acknowledged: decisions resolved.".to_string());
        }
        if vocab.all.is_empty() {
            return Err(BackendError::ProtocolViolation {
                reason: "contaminator needs a non-empty scenario vocabulary".to_string(),
            });
        }
        let mut best: Option<(&str, usize)> = None;
        for (agent_id, keywords) in &vocab.all {
            let mass: usize = keywords
                .iter()
                .map(|k| keyword_match_count(&prompt.full_text, k))
                .sum();
            if best.is_none_or(|(_, top)| mass > top) {
                best = Some((agent_id, mass));
            }
        }
        let (winner, mass) = best.expect("vocab checked non-empty");
        if mass == 0 {
            let (first_agent, keywords) = vocab.all.first_key_value().expect("non-empty");
            let keyword = keywords.first().ok_or_else(|| {
                BackendError::ProtocolViolation {
                    reason: format!("agent {first_agent} has an empty keyword list"),
                }
            })?;
            return Ok(answer_sentence(keyword));
        }
        let mut top_keyword: Option<(&str, usize)> = None;
        for keyword in &vocab.all[winner] {
            let hits = keyword_match_count(&prompt.full_text, keyword);
            if top_keyword.is_none_or(|(_, best)| hits > best) {
                top_keyword = Some((keyword, hits));
            }
        }
        let (top_keyword, _) = top_keyword.expect("winner has a non-empty keyword list");
        Ok(answer_sentence(top_keyword))
    }
}

/// Chat-completion request body: system prompt plus the assembled context
/// as the user message.
pub(crate) fn request_body(prompt: &BuiltContext, params: &CompletionParams) -> serde_json::Value {
    serde_json::json!({
        "model": params.model_name,
        "max_tokens": params.max_output_tokens.get(),
        "temperature": params.temperature,
        "messages": [
            {"role": "system", "content": SYSTEM_PROMPT},
            {"role": "user", "content": prompt.full_text},
        ],
    })
}

/// Pull the completion text out of either an OpenAI-style
/// (`choices[0].message.content`) or Anthropic-style (`content[0].text`)
/// response body.
pub(crate) fn extract_text(body: &serde_json::Value) -> Option<String> {
    if let Some(text) = body
        .get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("message"))
        .and_then(|m| m.get("content"))
        .and_then(|c| c.as_str())
    {
        return Some(text.to_string());
    }
    body.get("content")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("text"))
        .and_then(|t| t.as_str())
        .map(str::to_string)
}

/// Blocking chat-completion client with bounded retry. Transport errors,
/// 429s, and 5xx responses retry with exponential backoff; other statuses
/// fail immediately.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    api_key: String,
    endpoint: String,
    max_attempts: u32,
    initial_backoff: Duration,
}

impl HttpBackend {
    pub fn new(api_key: String, endpoint: String) -> Self {
        Self {
            client: reqwest::blocking::Client::new(),
            api_key,
            endpoint,
            max_attempts: 3,
            initial_backoff: Duration::from_millis(250),
        }
    }

    /// Build from `DACS_API_KEY` (required) and `DACS_ENDPOINT` (optional).
    pub fn from_env() -> Result<Self, BackendError> {
        let api_key = std::env::var(API_KEY_ENV).map_err(|_| BackendError::MissingApiKey)?;
        let endpoint =
            std::env::var(ENDPOINT_ENV).unwrap_or_else(|_| DEFAULT_ENDPOINT.to_string());
        Ok(Self::new(api_key, endpoint))
    }

    fn post_once(
        &self,
        url: &str,
        body: &serde_json::Value,
    ) -> Result<String, (bool, BackendError)> {
        let response = self
            .client
            .post(url)
            .bearer_auth(&self.api_key)
            .header("x-api-key", &self.api_key)
            .json(body)
            .send()
            .map_err(|e| {
                (
                    true,
                    BackendError::BackendUnavailable {
                        reason: format!("transport error: {e}"),
                    },
                )
            })?;
        let status = response.status();
        let text = response.text().unwrap_or_default();
        if !status.is_success() {
            let retryable = status.is_server_error() || status.as_u16() == 429;
            return Err((
                retryable,
                BackendError::BackendUnavailable {
                    reason: format!("status {status}: {}", text.chars().take(200).collect::<String>()),
                },
            ));
        }
        let parsed: serde_json::Value = serde_json::from_str(&text).map_err(|e| {
            (
                false,
                BackendError::BackendUnavailable {
                    reason: format!("unparseable response body: {e}"),
                },
            )
        })?;
        extract_text(&parsed).ok_or((
            false,
            BackendError::BackendUnavailable {
                reason: "response body has no completion text".to_string(),
            },
        ))
    }
}

impl Backend for HttpBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Http
    }

    fn complete(
        &self,
        prompt: &BuiltContext,
        params: &CompletionParams,
        _vocab: &ScenarioVocab,
    ) -> Result<String, BackendError> {
        let url = params.endpoint.as_deref().unwrap_or(&self.endpoint);
        let body = request_body(prompt, params);
        let mut backoff = self.initial_backoff;
        let mut last_error = BackendError::BackendUnavailable {
            reason: "no attempt made".to_string(),
        };
        for attempt in 0..self.max_attempts {
            match self.post_once(url, &body) {
                Ok(text) => return Ok(text),
                Err((retryable, err)) => {
                    last_error = err;
                    if !retryable || attempt + 1 == self.max_attempts {
                        break;
                    }
                    std::thread::sleep(backoff);
                    backoff *= 2;
                }
            }
        }
        Err(last_error)
    }
}
