//! Shared agent registry: one compressed status line per agent.
//!
//! The registry is the cheap, always-visible view of the fleet. Each entry
//! is capped so that a fleet of N agents never costs more than 200·N tokens
//! to render, no matter what the agents send. Oversized heartbeat fields are
//! truncated on entry, never rejected: a noisy agent loses detail, not its
//! registry row.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocols::Heartbeat;
use crate::tokenizer::{count_tokens, truncate_to, TokenCount};

/// Token budget for the task field of a registry entry.
pub const TASK_TOKEN_BUDGET: TokenCount = TokenCount(50);
/// Token budget for the last-output summary field of a registry entry.
pub const SUMMARY_TOKEN_BUDGET: TokenCount = TokenCount(100);
/// Ceiling for one rendered registry line.
pub const ENTRY_TOKEN_BUDGET: TokenCount = TokenCount(200);

/// Lifecycle state of an agent as reported through heartbeats.
/// `Complete` is terminal: once recorded, later heartbeats cannot move the
/// entry to any other status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AgentStatus {
    Running,
    Blocked,
    Waiting,
    Complete,
}

impl fmt::Display for AgentStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AgentStatus::Running => "RUNNING",
            AgentStatus::Blocked => "BLOCKED",
            AgentStatus::Waiting => "WAITING",
            AgentStatus::Complete => "COMPLETE",
        };
        f.write_str(s)
    }
}

/// Steering urgency. Ordering is total: LOW < MEDIUM < HIGH.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Urgency {
    Low,
    Medium,
    High,
}

impl fmt::Display for Urgency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Urgency::Low => "LOW",
            Urgency::Medium => "MEDIUM",
            Urgency::High => "HIGH",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("unknown agent: {agent_id}")]
    UnknownAgent { agent_id: String },
}

/// One agent's compressed status line. Field budgets are enforced on
/// construction, so any `RegistryEntry` renders within
/// [`ENTRY_TOKEN_BUDGET`] for identifier-sized agent ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    agent_id: String,
    task: String,
    status: AgentStatus,
    last_output_summary: String,
    urgency: Urgency,
    last_heartbeat_tick: u64,
}

impl RegistryEntry {
    pub fn new(
        agent_id: impl Into<String>,
        task: &str,
        status: AgentStatus,
        last_output_summary: &str,
        urgency: Urgency,
        last_heartbeat_tick: u64,
    ) -> Self {
        RegistryEntry {
            agent_id: agent_id.into(),
            task: truncate_to(task, TASK_TOKEN_BUDGET).to_string(),
            status,
            last_output_summary: truncate_to(last_output_summary, SUMMARY_TOKEN_BUDGET)
                .to_string(),
            urgency,
            last_heartbeat_tick,
        }
    }

    pub fn agent_id(&self) -> &str {
        &self.agent_id
    }

    pub fn task(&self) -> &str {
        &self.task
    }

    pub fn status(&self) -> AgentStatus {
        self.status
    }

    pub fn last_output_summary(&self) -> &str {
        &self.last_output_summary
    }

    pub fn urgency(&self) -> Urgency {
        self.urgency
    }

    pub fn last_heartbeat_tick(&self) -> u64 {
        self.last_heartbeat_tick
    }

    /// Copy of this entry with an empty summary. First stage of context
    /// degradation when a budget is tight.
    pub(crate) fn without_summary(&self) -> RegistryEntry {
        RegistryEntry {
            last_output_summary: String::new(),
            ..self.clone()
        }
    }
}

/// Render one entry as its single registry line.
pub fn render_entry(entry: &RegistryEntry) -> String {
    format!(
        "{}: {}, {}, {} [urgency={}]",
        entry.agent_id, entry.status, entry.task, entry.last_output_summary, entry.urgency
    )
}

/// The fleet view. Iteration is always lexicographic by agent id, which is
/// what makes renders and context builds reproducible.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Registry {
    entries: BTreeMap<String, RegistryEntry>,
}

impl Registry {
    pub fn new() -> Self {
        Registry::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, agent_id: &str) -> bool {
        self.entries.contains_key(agent_id)
    }

    pub fn get(&self, agent_id: &str) -> Option<&RegistryEntry> {
        self.entries.get(agent_id)
    }

    /// Entries in lexicographic agent-id order.
    pub fn iter(&self) -> impl Iterator<Item = &RegistryEntry> {
        self.entries.values()
    }

    /// Insert or replace the entry for the heartbeat's agent, truncating
    /// oversized fields to their budgets. A heartbeat can never push an
    /// agent out of `Complete`.
    pub fn upsert(&mut self, heartbeat: &Heartbeat) {
        let status = match self.entries.get(&heartbeat.agent_id) {
            Some(existing) if existing.status == AgentStatus::Complete => AgentStatus::Complete,
            _ => heartbeat.status,
        };
        let entry = RegistryEntry::new(
            heartbeat.agent_id.clone(),
            &heartbeat.task,
            status,
            &heartbeat.last_output_summary,
            heartbeat.urgency,
            heartbeat.tick,
        );
        self.entries.insert(entry.agent_id.clone(), entry);
    }

    /// Newline-joined registry lines, optionally excluding one agent.
    /// Excluding an id that is not present is an error: callers asking to
    /// hide an agent should know it exists.
    pub fn render(&self, exclude: Option<&str>) -> Result<String, RegistryError> {
        if let Some(id) = exclude {
            if !self.entries.contains_key(id) {
                return Err(RegistryError::UnknownAgent {
                    agent_id: id.to_string(),
                });
            }
        }
        let lines: Vec<String> = self
            .entries
            .values()
            .filter(|e| exclude != Some(e.agent_id.as_str()))
            .map(render_entry)
            .collect();
        Ok(lines.join("\n"))
    }
}

/// Total rendered size of a registry, for budget planning.
pub fn rendered_tokens(registry: &Registry) -> TokenCount {
    registry.iter().map(|e| count_tokens(&render_entry(e))).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hb(
        agent_id: &str,
        status: AgentStatus,
        task: &str,
        summary: &str,
        urgency: Urgency,
        tick: u64,
    ) -> Heartbeat {
        Heartbeat {
            agent_id: agent_id.to_string(),
            status,
            task: task.to_string(),
            last_output_summary: summary.to_string(),
            urgency,
            tick,
        }
    }

    #[test]
    fn renders_the_exact_line_format() {
        let entry = RegistryEntry::new(
            "a2",
            "transformer survey",
            AgentStatus::Running,
            "3/5 steps done",
            Urgency::Medium,
            7,
        );
        assert_eq!(
            render_entry(&entry),
            "a2: RUNNING, transformer survey, 3/5 steps done [urgency=MEDIUM]"
        );
    }

    #[test]
    fn upsert_truncates_oversized_fields() {
        let long_task: String = (0..70).map(|i| format!("w{i} ")).collect();
        let long_summary: String = (0..140).map(|i| format!("s{i} ")).collect();
        let mut reg = Registry::new();
        reg.upsert(&hb(
            "a1",
            AgentStatus::Running,
            &long_task,
            &long_summary,
            Urgency::Low,
            1,
        ));
        let entry = reg.get("a1").unwrap();
        assert_eq!(count_tokens(entry.task()), TokenCount(50));
        assert_eq!(count_tokens(entry.last_output_summary()), TokenCount(100));
        assert!(long_task.starts_with(entry.task()));
    }

    #[test]
    fn upsert_replaces_and_keeps_one_entry_per_agent() {
        let mut reg = Registry::new();
        reg.upsert(&hb("a1", AgentStatus::Running, "t", "s", Urgency::Low, 1));
        reg.upsert(&hb("a1", AgentStatus::Blocked, "t2", "s2", Urgency::High, 2));
        assert_eq!(reg.len(), 1);
        let e = reg.get("a1").unwrap();
        assert_eq!(e.status(), AgentStatus::Blocked);
        assert_eq!(e.task(), "t2");
        assert_eq!(e.last_heartbeat_tick(), 2);
    }

    #[test]
    fn complete_is_terminal() {
        let mut reg = Registry::new();
        reg.upsert(&hb("a1", AgentStatus::Complete, "t", "s", Urgency::Low, 1));
        reg.upsert(&hb("a1", AgentStatus::Running, "t", "s", Urgency::Low, 2));
        assert_eq!(reg.get("a1").unwrap().status(), AgentStatus::Complete);
        // The rest of the heartbeat still lands.
        assert_eq!(reg.get("a1").unwrap().last_heartbeat_tick(), 2);
    }

    #[test]
    fn render_orders_lexicographically_and_excludes() {
        let mut reg = Registry::new();
        for id in ["a10", "a2", "a1"] {
            reg.upsert(&hb(id, AgentStatus::Running, "t", "s", Urgency::Low, 1));
        }
        let all = reg.render(None).unwrap();
        let ids: Vec<&str> = all.lines().map(|l| l.split(':').next().unwrap()).collect();
        assert_eq!(ids, vec!["a1", "a10", "a2"]);

        let without = reg.render(Some("a10")).unwrap();
        assert!(!without.contains("a10:"));
        assert_eq!(without.lines().count(), 2);
    }

    #[test]
    fn render_excluding_unknown_agent_fails() {
        let mut reg = Registry::new();
        reg.upsert(&hb("a1", AgentStatus::Running, "t", "s", Urgency::Low, 1));
        assert_eq!(
            reg.render(Some("zz")),
            Err(RegistryError::UnknownAgent {
                agent_id: "zz".to_string()
            })
        );
    }

    #[test]
    fn render_of_single_excluded_agent_is_empty() {
        let mut reg = Registry::new();
        reg.upsert(&hb("a1", AgentStatus::Running, "t", "s", Urgency::Low, 1));
        assert_eq!(reg.render(Some("a1")).unwrap(), "");
    }

    #[test]
    fn urgency_orders_low_to_high() {
        assert!(Urgency::Low < Urgency::Medium);
        assert!(Urgency::Medium < Urgency::High);
    }

    fn arb_words(max: usize) -> impl Strategy<Value = String> {
        proptest::collection::vec("[a-z]{1,8}", 0..max).prop_map(|ws| ws.join(" "))
    }

    proptest! {
        #[test]
        fn entries_render_within_the_per_entry_budget(
            id in "[a-z][a-z0-9]{0,6}",
            task in arb_words(80),
            summary in arb_words(160),
            tick in 0u64..1000,
        ) {
            let entry = RegistryEntry::new(
                id, &task, AgentStatus::Waiting, &summary, Urgency::High, tick,
            );
            prop_assert!(count_tokens(&render_entry(&entry)) <= ENTRY_TOKEN_BUDGET);
        }

        #[test]
        fn registry_renders_within_linear_budget(
            ids in proptest::collection::btree_set("[a-z][a-z0-9]{0,6}", 1..12),
            task in arb_words(80),
            summary in arb_words(160),
        ) {
            let mut reg = Registry::new();
            for id in &ids {
                reg.upsert(&hb(id, AgentStatus::Running, &task, &summary, Urgency::Low, 3));
            }
            let rendered = reg.render(None).unwrap();
            prop_assert!(count_tokens(&rendered).0 <= ENTRY_TOKEN_BUDGET.0 * reg.len());
        }

        #[test]
        fn render_is_deterministic_for_equal_values(
            ids in proptest::collection::btree_set("[a-z][a-z0-9]{0,4}", 1..6),
        ) {
            let mut r1 = Registry::new();
            let mut r2 = Registry::new();
            // Insert in opposite orders; value equality must give render equality.
            for id in ids.iter() {
                r1.upsert(&hb(id, AgentStatus::Running, "task", "sum", Urgency::Medium, 1));
            }
            for id in ids.iter().rev() {
                r2.upsert(&hb(id, AgentStatus::Running, "task", "sum", Urgency::Medium, 1));
            }
            prop_assert_eq!(r1.render(None).unwrap(), r2.render(None).unwrap());
        }
    }
}
