//! Agent-to-orchestrator message types and the pending-request queue.
//!
//! Requests wait in a total order: urgency descending, then issue tick
//! ascending, then agent id ascending. The (agent_id, issued_tick) pair is
//! a unique key; re-submitting it is rejected so a retrying agent cannot
//! stack duplicate work. LOW requests are never served one-by-one; they
//! leave the queue only through [`PendingQueue::flush_low_batch`].

use std::cmp::Reverse;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::{AgentStatus, Urgency};
use crate::tokenizer::TokenCount;

/// Batch size that triggers a LOW flush on its own.
pub const DEFAULT_LOW_BATCH_SIZE: usize = 3;
/// Age (in ticks) of the oldest LOW request that triggers a flush.
pub const DEFAULT_LOW_MAX_AGE: u64 = 5;

/// An agent asking for a steering decision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SteeringRequest {
    pub agent_id: String,
    /// Excerpt of the agent's current partial output relevant to the ask.
    pub context: String,
    pub question: String,
    /// Whether the agent halts until answered.
    pub blocking: bool,
    pub urgency: Urgency,
    pub issued_tick: u64,
}

/// The orchestrator's answer to one steering request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SteeringResponse {
    pub agent_id: String,
    pub response_text: String,
    pub answered_tick: u64,
    /// Exact token count of the prompt used for this answer.
    pub context_tokens_at_call: TokenCount,
}

/// Compact per-tick status update from an agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Heartbeat {
    pub agent_id: String,
    pub status: AgentStatus,
    pub task: String,
    pub last_output_summary: String,
    pub urgency: Urgency,
    pub tick: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("duplicate steering request from {agent_id} at tick {issued_tick}")]
    DuplicateRequest { agent_id: String, issued_tick: u64 },
}

type QueueKey = (Reverse<Urgency>, u64, String);

fn key_of(req: &SteeringRequest) -> QueueKey {
    (
        Reverse(req.urgency),
        req.issued_tick,
        req.agent_id.clone(),
    )
}

/// Priority queue of unanswered steering requests.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PendingQueue {
    items: BTreeMap<QueueKey, SteeringRequest>,
}

impl PendingQueue {
    pub fn new() -> Self {
        PendingQueue::default()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Queue order: urgency descending, tick ascending, agent id ascending.
    pub fn iter(&self) -> impl Iterator<Item = &SteeringRequest> {
        self.items.values()
    }

    pub fn enqueue(&mut self, req: SteeringRequest) -> Result<(), ProtocolError> {
        let duplicate = self
            .items
            .values()
            .any(|r| r.agent_id == req.agent_id && r.issued_tick == req.issued_tick);
        if duplicate {
            return Err(ProtocolError::DuplicateRequest {
                agent_id: req.agent_id,
                issued_tick: req.issued_tick,
            });
        }
        self.items.insert(key_of(&req), req);
        Ok(())
    }

    /// Highest-priority request without removing it.
    pub fn peek(&self) -> Option<&SteeringRequest> {
        self.items.values().next()
    }

    /// Remove and return the highest-priority request.
    pub fn dequeue_next(&mut self) -> Option<SteeringRequest> {
        let key = self.items.keys().next().cloned()?;
        self.items.remove(&key)
    }

    /// True if some queued request from `agent_id` was issued after
    /// `issued_tick`. Used to detect saved sessions made stale by a newer ask.
    pub fn has_newer_from(&self, agent_id: &str, issued_tick: u64) -> bool {
        self.items
            .values()
            .any(|r| r.agent_id == agent_id && r.issued_tick > issued_tick)
    }

    /// Batch flush of LOW requests. Fires when at least `batch_size` LOW
    /// requests are waiting, or when the oldest LOW request is `max_age`
    /// ticks old. When it fires, *all* LOW requests leave the queue in
    /// queue order; otherwise nothing is removed. MEDIUM and HIGH requests
    /// are never touched.
    pub fn flush_low_batch(
        &mut self,
        now_tick: u64,
        batch_size: usize,
        max_age: u64,
    ) -> Vec<SteeringRequest> {
        let lows: Vec<QueueKey> = self
            .items
            .iter()
            .filter(|(_, r)| r.urgency == Urgency::Low)
            .map(|(k, _)| k.clone())
            .collect();
        if lows.is_empty() {
            return Vec::new();
        }
        let oldest_age = self
            .items
            .values()
            .filter(|r| r.urgency == Urgency::Low)
            .map(|r| now_tick.saturating_sub(r.issued_tick))
            .max()
            .unwrap_or(0);
        if lows.len() >= batch_size || oldest_age >= max_age {
            lows.into_iter()
                .map(|k| self.items.remove(&k).expect("key collected from map"))
                .collect()
        } else {
            Vec::new()
        }
    }
}
