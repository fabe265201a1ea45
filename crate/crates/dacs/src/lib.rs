//! Dynamic attentional context scoping (DACS) for multi-agent LLM
//! orchestration.
//!
//! An orchestrator supervises N worker agents. Instead of showing every
//! model call the concatenation of all agents' contexts, it keeps a capped
//! one-line registry entry per agent and switches into a per-agent focus
//! context only when that agent asks to be steered. The crate ships:
//!
//! - the tokenizer, registry, and context builders that implement scoping;
//! - the orchestrator state machine (registry / focus / user-interact) with
//!   priority interrupts, LOW-urgency batching, and session resume;
//! - scripted scenario agents, marker-driven pseudo-LLM agents, and a live
//!   LLM agent loop behind one interface;
//! - deterministic mock backends and an HTTP chat-completion backend;
//! - scoring (steering accuracy, cross-agent contamination), statistics
//!   (Welch's t-test, OLS fits, Cohen's kappa), and a reproducible
//!   experiment harness with JSONL trial logs and a lock-protected summary
//!   CSV.

pub mod agents;
pub mod backend;
pub mod context;
pub mod experiment;
pub mod metrics;
pub mod orchestrator;
pub mod protocols;
pub mod registry;
pub mod stats;
pub mod tokenizer;

pub use context::{
    build_flat_context, build_focus_context, build_registry_context, build_user_context,
    predicted_focus_tokens, BuilderConfig, BuiltContext, ContextError, FocusRecord, SectionLabel,
};
pub use registry::{AgentStatus, Registry, RegistryEntry, Urgency};
pub use tokenizer::{count_tokens, truncate_to, RuleTokenizer, TokenCount, Tokenizer};
