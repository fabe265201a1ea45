//! The three-state orchestrator: a deterministic state machine over
//! REGISTRY, FOCUS(agent), and USER_INTERACT.
//!
//! Non-LOW steering requests arriving at rest open a focus session. HIGH
//! requests from a different agent interrupt a live session, pushing it
//! onto a LIFO save stack; the interrupted session resumes once the
//! interrupter finishes, unless it went stale in the meantime. MEDIUM and
//! LOW requests arriving mid-session queue. LOW requests never open a
//! session directly: they wait for a batch flush on a tick boundary.
//!
//! User messages are answered immediately at rest and queued otherwise;
//! they are never dropped. Queued user messages drain ahead of saved and
//! queued steering work when the machine returns to rest, on the view that
//! the human outranks agent-to-orchestrator traffic.
//!
//! Sessions are atomic with respect to the backend: an interrupt takes
//! effect between calls, never inside one. The driver owns the loop; this
//! module only decides transitions and emits the actions the driver must
//! perform.

use thiserror::Error;

use crate::backend::{Backend, BackendError, CompletionParams, ScenarioVocab};
use crate::context::{build_focus_context, BuilderConfig, ContextError, FocusRecord};
use crate::protocols::{
    PendingQueue, ProtocolError, SteeringRequest, SteeringResponse, DEFAULT_LOW_BATCH_SIZE,
    DEFAULT_LOW_MAX_AGE,
};
use crate::registry::{AgentStatus, Registry, Urgency};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OrchestratorState {
    Registry,
    Focus(String),
    UserInteract,
}

/// A focus session displaced by a HIGH interrupt, waiting to resume.
/// `partial_exchange` is reserved for a backend that can checkpoint
/// mid-call; with atomic sessions it stays empty and the whole request is
/// re-run on resume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SavedSession {
    pub agent_id: String,
    pub request: SteeringRequest,
    pub partial_exchange: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    SteeringRequestArrived(SteeringRequest),
    SteeringComplete,
    SteeringAbandoned,
    UserMessage(String),
    UserInteractDone,
    Tick,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub tick: u64,
    pub kind: EventKind,
}

impl Event {
    pub fn new(tick: u64, kind: EventKind) -> Self {
        Event { tick, kind }
    }
}

/// What the driver must do after a transition, in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    /// Run a steering session for this agent's current request.
    EnterFocus(String),
    /// The named agent's live session was pushed onto the save stack.
    SaveSession(String),
    /// Run the saved session that was just popped for this agent.
    ResumeSession(String),
    /// The request was queued for later.
    QueueRequest(String),
    /// The user message was queued for later.
    QueueUserMessage,
    /// Answer this user message now (the machine is in USER_INTERACT).
    AnswerUser(String),
    /// These LOW requests left the queue as one batch; sessions for them
    /// follow one at a time.
    ProcessLowBatch(Vec<SteeringRequest>),
    /// A saved or queued request was dropped because its agent finished or
    /// re-asked; it will never get a session.
    DiscardStale(String),
    /// A HIGH re-request from the agent already in focus; the live session
    /// covers it, so no new session opens.
    AbsorbIntoFocus(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OrchestratorError {
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// One transition as it happened: state seen on entry, the event, and the
/// actions emitted. Traces are the replay-determinism witness.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub tick: u64,
    pub state: OrchestratorState,
    pub event: EventKind,
    pub actions: Vec<Action>,
}

#[derive(Debug)]
pub struct Orchestrator {
    state: OrchestratorState,
    queue: PendingQueue,
    saved: Vec<SavedSession>,
    user_queue: std::collections::VecDeque<String>,
    batch_backlog: std::collections::VecDeque<SteeringRequest>,
    current: Option<SteeringRequest>,
    low_batch_size: usize,
    low_max_age: u64,
    trace: Vec<TraceRecord>,
}

impl Default for Orchestrator {
    fn default() -> Self {
        Self::new()
    }
}

impl Orchestrator {
    pub fn new() -> Self {
        Orchestrator {
            state: OrchestratorState::Registry,
            queue: PendingQueue::new(),
            saved: Vec::new(),
            user_queue: std::collections::VecDeque::new(),
            batch_backlog: std::collections::VecDeque::new(),
            current: None,
            low_batch_size: DEFAULT_LOW_BATCH_SIZE,
            low_max_age: DEFAULT_LOW_MAX_AGE,
            trace: Vec::new(),
        }
    }

    pub fn with_low_batch(mut self, batch_size: usize, max_age: u64) -> Self {
        self.low_batch_size = batch_size;
        self.low_max_age = max_age;
        self
    }

    pub fn state(&self) -> &OrchestratorState {
        &self.state
    }

    /// The request the live focus session must answer. Set whenever an
    /// EnterFocus or ResumeSession action is emitted.
    pub fn current_request(&self) -> Option<&SteeringRequest> {
        self.current.as_ref()
    }

    pub fn saved_depth(&self) -> usize {
        self.saved.len()
    }

    pub fn pending_requests(&self) -> usize {
        self.queue.len() + self.batch_backlog.len()
    }

    pub fn pending_user_messages(&self) -> usize {
        self.user_queue.len()
    }

    /// True when nothing is in flight and nothing is waiting: the driver
    /// can stop pumping events.
    pub fn is_quiescent(&self) -> bool {
        self.state == OrchestratorState::Registry
            && self.saved.is_empty()
            && self.user_queue.is_empty()
            && self.batch_backlog.is_empty()
            && self.queue.is_empty()
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    /// Apply one event and return the actions the driver must perform, in
    /// order. Deterministic: one (state, event) pair always yields the same
    /// transition and action list.
    pub fn handle_event(
        &mut self,
        event: Event,
        registry: &Registry,
    ) -> Result<Vec<Action>, OrchestratorError> {
        let state_before = self.state.clone();
        let tick = event.tick;
        let kind = event.kind.clone();
        let actions = self.transition(event, registry)?;
        self.trace.push(TraceRecord {
            tick,
            state: state_before,
            event: kind,
            actions: actions.clone(),
        });
        Ok(actions)
    }

    fn transition(
        &mut self,
        event: Event,
        registry: &Registry,
    ) -> Result<Vec<Action>, OrchestratorError> {
        match (&self.state, event.kind) {
            (OrchestratorState::Registry, EventKind::SteeringRequestArrived(req)) => {
                if req.urgency == Urgency::Low {
                    let agent = req.agent_id.clone();
                    self.queue.enqueue(req)?;
                    Ok(vec![Action::QueueRequest(agent)])
                } else {
                    let agent = req.agent_id.clone();
                    self.state = OrchestratorState::Focus(agent.clone());
                    self.current = Some(req);
                    Ok(vec![Action::EnterFocus(agent)])
                }
            }
            (OrchestratorState::Registry, EventKind::UserMessage(text)) => {
                self.state = OrchestratorState::UserInteract;
                Ok(vec![Action::AnswerUser(text)])
            }
            (OrchestratorState::Registry, EventKind::Tick) => {
                let mut actions = self.drain_next(registry);
                if actions.is_empty() {
                    let batch =
                        self.queue
                            .flush_low_batch(event.tick, self.low_batch_size, self.low_max_age);
                    if !batch.is_empty() {
                        self.batch_backlog.extend(batch.iter().cloned());
                        actions.push(Action::ProcessLowBatch(batch));
                        actions.extend(self.drain_next(registry));
                    }
                }
                Ok(actions)
            }
            (OrchestratorState::Registry, EventKind::SteeringComplete) => {
                Err(OrchestratorError::ProtocolViolation(
                    "SteeringComplete with no focus session live".to_string(),
                ))
            }
            (OrchestratorState::Registry, EventKind::SteeringAbandoned) => {
                Err(OrchestratorError::ProtocolViolation(
                    "SteeringAbandoned with no focus session live".to_string(),
                ))
            }
            (OrchestratorState::Registry, EventKind::UserInteractDone) => {
                Err(OrchestratorError::ProtocolViolation(
                    "UserInteractDone outside USER_INTERACT".to_string(),
                ))
            }

            (OrchestratorState::Focus(focused), EventKind::SteeringRequestArrived(req)) => {
                let focused = focused.clone();
                if req.urgency == Urgency::High && req.agent_id != focused {
                    let live = self.current.take().expect("focus state carries a request");
                    self.saved.push(SavedSession {
                        agent_id: focused.clone(),
                        request: live,
                        partial_exchange: None,
                    });
                    let agent = req.agent_id.clone();
                    self.state = OrchestratorState::Focus(agent.clone());
                    self.current = Some(req);
                    Ok(vec![Action::SaveSession(focused), Action::EnterFocus(agent)])
                } else if req.urgency == Urgency::High {
                    Ok(vec![Action::AbsorbIntoFocus(focused)])
                } else {
                    let agent = req.agent_id.clone();
                    self.queue.enqueue(req)?;
                    Ok(vec![Action::QueueRequest(agent)])
                }
            }
            (OrchestratorState::Focus(_), EventKind::SteeringComplete)
            | (OrchestratorState::Focus(_), EventKind::SteeringAbandoned) => {
                self.state = OrchestratorState::Registry;
                self.current = None;
                Ok(self.drain_next(registry))
            }
            (OrchestratorState::Focus(_), EventKind::UserMessage(text)) => {
                self.user_queue.push_back(text);
                Ok(vec![Action::QueueUserMessage])
            }
            (OrchestratorState::Focus(_), EventKind::Tick) => Ok(Vec::new()),
            (OrchestratorState::Focus(_), EventKind::UserInteractDone) => {
                Err(OrchestratorError::ProtocolViolation(
                    "UserInteractDone outside USER_INTERACT".to_string(),
                ))
            }

            (OrchestratorState::UserInteract, EventKind::UserInteractDone) => {
                self.state = OrchestratorState::Registry;
                Ok(self.drain_next(registry))
            }
            (OrchestratorState::UserInteract, EventKind::SteeringRequestArrived(req)) => {
                // USER_INTERACT is not interruptible, even by HIGH.
                let agent = req.agent_id.clone();
                self.queue.enqueue(req)?;
                Ok(vec![Action::QueueRequest(agent)])
            }
            (OrchestratorState::UserInteract, EventKind::UserMessage(text)) => {
                self.user_queue.push_back(text);
                Ok(vec![Action::QueueUserMessage])
            }
            (OrchestratorState::UserInteract, EventKind::Tick) => Ok(Vec::new()),
            (OrchestratorState::UserInteract, EventKind::SteeringComplete)
            | (OrchestratorState::UserInteract, EventKind::SteeringAbandoned) => {
                Err(OrchestratorError::ProtocolViolation(
                    "steering session events outside FOCUS".to_string(),
                ))
            }
        }
    }

    /// Pick the next piece of work after returning to rest. Order: queued
    /// user messages, then saved sessions (newest first, stale ones
    /// dropped), then queued non-LOW requests (stale ones dropped), then
    /// the remainder of a flushed LOW batch. LOW requests still in the
    /// queue wait for a batch flush.
    fn drain_next(&mut self, registry: &Registry) -> Vec<Action> {
        let mut actions = Vec::new();

        if let Some(text) = self.user_queue.pop_front() {
            self.state = OrchestratorState::UserInteract;
            actions.push(Action::AnswerUser(text));
            return actions;
        }

        while let Some(session) = self.saved.pop() {
            if self.is_stale(&session.agent_id, session.request.issued_tick, registry) {
                actions.push(Action::DiscardStale(session.agent_id));
                continue;
            }
            self.state = OrchestratorState::Focus(session.agent_id.clone());
            self.current = Some(session.request);
            actions.push(Action::ResumeSession(session.agent_id));
            return actions;
        }

        while self
            .queue
            .peek()
            .is_some_and(|r| r.urgency > Urgency::Low)
        {
            let req = self.queue.dequeue_next().expect("peek saw an item");
            if agent_complete(&req.agent_id, registry) {
                actions.push(Action::DiscardStale(req.agent_id));
                continue;
            }
            let agent = req.agent_id.clone();
            self.state = OrchestratorState::Focus(agent.clone());
            self.current = Some(req);
            actions.push(Action::EnterFocus(agent));
            return actions;
        }

        while let Some(req) = self.batch_backlog.pop_front() {
            if agent_complete(&req.agent_id, registry) {
                actions.push(Action::DiscardStale(req.agent_id));
                continue;
            }
            let agent = req.agent_id.clone();
            self.state = OrchestratorState::Focus(agent.clone());
            self.current = Some(req);
            actions.push(Action::EnterFocus(agent));
            return actions;
        }

        actions
    }

    /// A displaced session is stale when its agent already finished or has
    /// a newer request waiting in the queue.
    fn is_stale(&self, agent_id: &str, issued_tick: u64, registry: &Registry) -> bool {
        agent_complete(agent_id, registry) || self.queue.has_newer_from(agent_id, issued_tick)
    }

}

fn agent_complete(agent_id: &str, registry: &Registry) -> bool {
    registry
        .get(agent_id)
        .is_some_and(|e| e.status() == AgentStatus::Complete)
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error("steering session abandoned: {source}")]
    Abandoned { source: BackendError },
}

/// Everything needed to place one model call: the backend plus the
/// parameters and keyword table that ride along with every completion.
#[derive(Clone, Copy)]
pub struct ModelCall<'a> {
    pub backend: &'a dyn Backend,
    pub params: &'a CompletionParams,
    pub vocab: &'a ScenarioVocab,
}

/// Run one atomic steering session: build the focus prompt with the pending
/// question inside it, call the backend once, and append the finished
/// exchange to the agent's history.
///
/// The prompt's exact token count is recorded as `context_tokens_at_call`.
/// On backend failure the history is left untouched and the caller should
/// feed SteeringAbandoned; on success, SteeringComplete.
pub fn run_steering_session(
    req: &SteeringRequest,
    focus: &mut FocusRecord,
    registry: &Registry,
    cfg: &BuilderConfig,
    call: ModelCall<'_>,
    now_tick: u64,
) -> Result<SteeringResponse, SessionError> {
    let with_question = focus.with_pending_question(&req.question);
    let prompt = build_focus_context(&req.agent_id, &with_question, registry, cfg)?;
    let text = call
        .backend
        .complete(&prompt, call.params, call.vocab)
        .map_err(|source| SessionError::Abandoned { source })?;
    focus
        .steering_history
        .push((req.question.clone(), text.clone()));
    Ok(SteeringResponse {
        agent_id: req.agent_id.clone(),
        response_text: text,
        answered_tick: now_tick,
        context_tokens_at_call: prompt.token_count,
    })
}
