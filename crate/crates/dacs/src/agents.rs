//! Scenario fixtures and the agents that act them out.
//!
//! A scenario file declares a fleet of agents, each with an ordered list of
//! decision points: the ticks where the agent stops and asks the
//! orchestrator which way to go, together with the ground-truth keywords a
//! correct answer must contain. Scripted runs re-sample the firing ticks
//! per trial (seeded, distinct, order-preserving) so every trial sees a
//! fresh schedule while the decisions themselves stay fixed.
//!
//! Free-running model-backed agents speak the same protocol through a
//! bracket grammar: `[[STEER: question]]` asks for guidance, `[[DONE]]`
//! ends the task. Hard caps (fewer than 3 requests, fewer than 12 steps)
//! keep live runs bounded.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ScenarioVocab};
use crate::context::BuiltContext;
use crate::orchestrator::ModelCall;
use crate::protocols::{Heartbeat, SteeringRequest};
use crate::registry::{AgentStatus, Urgency};
use crate::tokenizer::count_tokens;

/// Most steering requests one free-running agent may emit.
pub const LLM_AGENT_MAX_REQUESTS: u32 = 3;
/// Most model steps one free-running agent may run.
pub const LLM_AGENT_MAX_STEPS: u32 = 12;

/// One scripted stop: the tick offset, the question asked, and what a
/// correct answer must contain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionPoint {
    pub step: u64,
    pub question: String,
    /// Slice of the agent's working output around the stop; carries the
    /// decision's own vocabulary.
    pub context_excerpt: String,
    pub urgency: Urgency,
    pub blocking: bool,
    pub expected_keywords: Vec<String>,
    /// What the agent does if the answer never arrives.
    pub default_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioAgent {
    pub agent_id: String,
    pub domain_label: String,
    pub task_description: String,
    pub decisions: Vec<DecisionPoint>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserMessageFixture {
    pub tick: u64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub scenario_id: String,
    pub total_steps: u64,
    pub agents: Vec<ScenarioAgent>,
    #[serde(default)]
    pub user_messages: Vec<UserMessageFixture>,
}

impl Scenario {
    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn total_decisions(&self) -> usize {
        self.agents.iter().map(|a| a.decisions.len()).sum()
    }

    pub fn agent(&self, agent_id: &str) -> Option<&ScenarioAgent> {
        self.agents.iter().find(|a| a.agent_id == agent_id)
    }

    /// Keyword table the mock backends answer from: per agent, the union of
    /// expected keywords over its decisions, first-seen order, deduplicated.
    pub fn vocab(&self) -> ScenarioVocab {
        let mut vocab = ScenarioVocab::new();
        for agent in &self.agents {
            let mut seen = BTreeSet::new();
            let mut all = Vec::new();
            for kw in agent.decisions.iter().flat_map(|d| &d.expected_keywords) {
                let folded = kw.to_lowercase();
                if seen.insert(folded) {
                    all.push(kw.clone());
                }
            }
            vocab.insert_agent(&agent.agent_id, all);
        }
        vocab
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario invalid at {detail}")]
    ScenarioInvalid { detail: String },
    #[error("unknown scenario {name} (builtins: {available})")]
    UnknownScenario { name: String, available: String },
}

fn invalid(detail: impl Into<String>) -> ScenarioError {
    ScenarioError::ScenarioInvalid {
        detail: detail.into(),
    }
}

/// Structural validation beyond what deserialization enforces. Returns the
/// scenario unchanged so loaders can chain it.
pub fn validate_scenario(scenario: Scenario) -> Result<Scenario, ScenarioError> {
    if scenario.scenario_id.is_empty() {
        return Err(invalid("scenario_id: must be non-empty"));
    }
    if scenario.total_steps == 0 {
        return Err(invalid("total_steps: must be positive"));
    }
    if scenario.agents.is_empty() {
        return Err(invalid("agents: must list at least one agent"));
    }
    let mut ids = BTreeSet::new();
    for (ai, agent) in scenario.agents.iter().enumerate() {
        if agent.agent_id.is_empty() {
            return Err(invalid(format!("agents[{ai}].agent_id: must be non-empty")));
        }
        if !ids.insert(agent.agent_id.clone()) {
            return Err(invalid(format!(
                "agents[{ai}].agent_id: duplicate \"{}\"",
                agent.agent_id
            )));
        }
        if agent.decisions.is_empty() {
            return Err(invalid(format!(
                "agents[{ai}].decisions: must list at least one decision"
            )));
        }
        if agent.decisions.len() as u64 > scenario.total_steps {
            return Err(invalid(format!(
                "agents[{ai}].decisions: {} decisions cannot be scheduled within {} steps",
                agent.decisions.len(),
                scenario.total_steps
            )));
        }
        let mut prev_step = 0u64;
        for (di, decision) in agent.decisions.iter().enumerate() {
            let at = format!("agents[{ai}].decisions[{di}]");
            if decision.step == 0 {
                return Err(invalid(format!("{at}.step: must be positive")));
            }
            if decision.step <= prev_step {
                return Err(invalid(format!(
                    "{at}.step: {} does not strictly increase (previous {prev_step})",
                    decision.step
                )));
            }
            if decision.step > scenario.total_steps {
                return Err(invalid(format!(
                    "{at}.step: {} exceeds total_steps {}",
                    decision.step, scenario.total_steps
                )));
            }
            if decision.expected_keywords.is_empty() {
                return Err(invalid(format!("{at}.expected_keywords: must be non-empty")));
            }
            if decision.expected_keywords.iter().any(|k| k.trim().is_empty()) {
                return Err(invalid(format!(
                    "{at}.expected_keywords: keywords must be non-blank"
                )));
            }
            prev_step = decision.step;
        }
    }
    for (mi, message) in scenario.user_messages.iter().enumerate() {
        if message.tick == 0 || message.tick > scenario.total_steps {
            return Err(invalid(format!(
                "user_messages[{mi}].tick: {} outside 1..={}",
                message.tick, scenario.total_steps
            )));
        }
        if message.text.trim().is_empty() {
            return Err(invalid(format!("user_messages[{mi}].text: must be non-blank")));
        }
    }
    Ok(scenario)
}

/// Parse and validate a scenario from JSON text. `origin` names the source
/// in error messages.
pub fn parse_scenario(json: &str, origin: &str) -> Result<Scenario, ScenarioError> {
    let scenario: Scenario = serde_json::from_str(json)
        .map_err(|e| invalid(format!("{origin}: {e}")))?;
    validate_scenario(scenario)
}

/// Load and validate a scenario file.
pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scenario(&text, &path.display().to_string())
}

/// The eight checked-in scenarios, in phase order.
pub const BUILTIN_SCENARIOS: [(&str, &str); 8] = [
    ("s1_n3", include_str!("../scenarios/s1_n3.json")),
    ("s2_n5", include_str!("../scenarios/s2_n5.json")),
    ("s3_n10", include_str!("../scenarios/s3_n10.json")),
    ("s4_n3_homogeneous", include_str!("../scenarios/s4_n3_homogeneous.json")),
    ("s5_n5_crossfire", include_str!("../scenarios/s5_n5_crossfire.json")),
    ("s6_n5_cascade", include_str!("../scenarios/s6_n5_cascade.json")),
    ("s7_n5_dense_d2", include_str!("../scenarios/s7_n5_dense_d2.json")),
    ("s8_n3_dense_d3", include_str!("../scenarios/s8_n3_dense_d3.json")),
];

pub fn builtin_names() -> Vec<&'static str> {
    BUILTIN_SCENARIOS.iter().map(|(n, _)| *n).collect()
}

/// Resolve a name against the builtin table, then the filesystem.
pub fn resolve_scenario(name_or_path: &str) -> Result<Scenario, ScenarioError> {
    if let Some((name, json)) = BUILTIN_SCENARIOS
        .iter()
        .find(|(n, _)| *n == name_or_path)
    {
        return parse_scenario(json, name);
    }
    let path = Path::new(name_or_path);
    if path.exists() {
        return load_scenario(path);
    }
    Err(ScenarioError::UnknownScenario {
        name: name_or_path.to_string(),
        available: builtin_names().join(", "),
    })
}

/// Keywords shared between agents, found case-insensitively. Overlap is
/// reported, never rejected: the homogeneous-vocabulary scenario overlaps
/// on purpose.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DisjointnessReport {
    /// (agent a, agent b, keyword) with a < b.
    pub overlaps: Vec<(String, String, String)>,
}

impl DisjointnessReport {
    pub fn is_disjoint(&self) -> bool {
        self.overlaps.is_empty()
    }
}

pub fn keyword_disjointness(scenario: &Scenario) -> DisjointnessReport {
    let mut sets: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
    for agent in &scenario.agents {
        let set = sets.entry(agent.agent_id.as_str()).or_default();
        for kw in agent.decisions.iter().flat_map(|d| &d.expected_keywords) {
            set.insert(kw.to_lowercase());
        }
    }
    let ids: Vec<&str> = sets.keys().copied().collect();
    let mut overlaps = Vec::new();
    for (i, a) in ids.iter().enumerate() {
        for b in &ids[i + 1..] {
            for kw in sets[a].intersection(&sets[b]) {
                overlaps.push((a.to_string(), b.to_string(), kw.clone()));
            }
        }
    }
    DisjointnessReport { overlaps }
}

/// One scripted agent inside one trial: fixed decisions, per-trial firing
/// schedule.
#[derive(Debug, Clone)]
pub struct ScriptedAgentRun {
    agent: ScenarioAgent,
    /// Firing tick of each decision, index-aligned, strictly ascending.
    schedule: Vec<u64>,
    fired: Vec<bool>,
    answered: Vec<bool>,
}

impl ScriptedAgentRun {
    /// Schedule from the authored `step` values.
    pub fn new_authored(agent: &ScenarioAgent) -> Self {
        let schedule = agent.decisions.iter().map(|d| d.step).collect();
        Self::with_schedule(agent, schedule)
    }

    /// Schedule re-sampled for one trial: as many distinct ticks in
    /// 1..=total_steps as there are decisions, sorted, assigned in decision
    /// order. Every decision still fires exactly once.
    pub fn new_sampled(agent: &ScenarioAgent, total_steps: u64, rng: &mut ChaCha8Rng) -> Self {
        let k = agent.decisions.len();
        let mut ticks: Vec<u64> = rand::seq::index::sample(rng, total_steps as usize, k)
            .into_iter()
            .map(|i| i as u64 + 1)
            .collect();
        ticks.sort_unstable();
        Self::with_schedule(agent, ticks)
    }

    fn with_schedule(agent: &ScenarioAgent, schedule: Vec<u64>) -> Self {
        let n = agent.decisions.len();
        assert_eq!(schedule.len(), n, "one firing tick per decision");
        ScriptedAgentRun {
            agent: agent.clone(),
            schedule,
            fired: vec![false; n],
            answered: vec![false; n],
        }
    }

    pub fn agent(&self) -> &ScenarioAgent {
        &self.agent
    }

    pub fn schedule(&self) -> &[u64] {
        &self.schedule
    }

    pub fn is_complete(&self) -> bool {
        self.answered.iter().all(|&a| a)
    }

    pub fn decision(&self, idx: usize) -> &DecisionPoint {
        &self.agent.decisions[idx]
    }

    pub fn mark_answered(&mut self, idx: usize) {
        self.answered[idx] = true;
    }

    fn oldest_outstanding(&self) -> Option<usize> {
        (0..self.fired.len()).find(|&i| self.fired[i] && !self.answered[i])
    }

    /// Advance one tick: always a heartbeat, plus the decision that fires
    /// at this tick, if any, as (decision index, request).
    pub fn step(&mut self, tick: u64) -> (Heartbeat, Option<(usize, SteeringRequest)>) {
        let firing = (0..self.schedule.len())
            .find(|&i| self.schedule[i] == tick && !self.fired[i]);
        let request = firing.map(|i| {
            self.fired[i] = true;
            let d = &self.agent.decisions[i];
            (
                i,
                SteeringRequest {
                    agent_id: self.agent.agent_id.clone(),
                    context: d.context_excerpt.clone(),
                    question: d.question.clone(),
                    blocking: d.blocking,
                    urgency: d.urgency,
                    issued_tick: tick,
                },
            )
        });

        let status = if self.is_complete() {
            AgentStatus::Complete
        } else if let Some(i) = self.oldest_outstanding() {
            if self.agent.decisions[i].blocking {
                AgentStatus::Blocked
            } else {
                AgentStatus::Waiting
            }
        } else {
            AgentStatus::Running
        };
        let urgency = self
            .oldest_outstanding()
            .map_or(Urgency::Low, |i| self.agent.decisions[i].urgency);
        let answered_count = self.answered.iter().filter(|&&a| a).count();
        let heartbeat = Heartbeat {
            agent_id: self.agent.agent_id.clone(),
            status,
            task: self.agent.task_description.clone(),
            last_output_summary: format!(
                "{answered_count}/{} steps done",
                self.agent.decisions.len()
            ),
            urgency,
            tick,
        };
        (heartbeat, request)
    }
}

/// Marker parsed from free-form agent output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MarkerEvent {
    Steer(String),
    Done,
    None,
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("malformed marker: [[STEER: without closing ]]")]
    MalformedMarker,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Scan agent output for the first steering or completion marker. A
/// steering marker wins over a completion marker regardless of position.
pub fn extract_marker(agent_output: &str) -> Result<MarkerEvent, AgentError> {
    const STEER_OPEN: &str = "[[STEER:";
    const CLOSE: &str = "]]";
    const DONE: &str = "[[DONE]]";
    if let Some(at) = agent_output.find(STEER_OPEN) {
        let rest = &agent_output[at + STEER_OPEN.len()..];
        let end = rest.find(CLOSE).ok_or(AgentError::MalformedMarker)?;
        return Ok(MarkerEvent::Steer(rest[..end].trim().to_string()));
    }
    if agent_output.contains(DONE) {
        return Ok(MarkerEvent::Done);
    }
    Ok(MarkerEvent::None)
}

/// Whether a free-running agent may emit another steering request: it must
/// still be under both the request cap and the step cap.
pub fn enforce_llm_agent_limits(request_count: u32, step_count: u32) -> bool {
    request_count < LLM_AGENT_MAX_REQUESTS && step_count < LLM_AGENT_MAX_STEPS
}

/// A free-running model-backed agent speaking the marker protocol. Drives
/// the same Heartbeat/SteeringRequest interface as scripted runs.
#[derive(Debug)]
pub struct LlmAgentLoop {
    pub agent_id: String,
    pub task_description: String,
    transcript: Vec<String>,
    requests_made: u32,
    steps_run: u32,
    finished: bool,
}

impl LlmAgentLoop {
    pub fn new(agent_id: impl Into<String>, task_description: impl Into<String>) -> Self {
        LlmAgentLoop {
            agent_id: agent_id.into(),
            task_description: task_description.into(),
            transcript: Vec::new(),
            requests_made: 0,
            steps_run: 0,
            finished: false,
        }
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn requests_made(&self) -> u32 {
        self.requests_made
    }

    pub fn steps_run(&self) -> u32 {
        self.steps_run
    }

    /// Record the orchestrator's answer to this agent's last request so the
    /// next step sees it.
    pub fn record_answer(&mut self, answer: &str) {
        self.transcript.push(format!("GUIDANCE RECEIVED: {answer}"));
    }

    fn agent_prompt(&self) -> BuiltContext {
        let mut text = format!(
            "AGENT: {}\nTASK: {}\nRULES: emit [[STEER: question]] to ask the orchestrator, \
[[DONE]] when finished.",
            self.agent_id, self.task_description
        );
        for entry in &self.transcript {
            text.push('\n');
            text.push_str(entry);
        }
        BuiltContext {
            token_count: count_tokens(&text),
            full_text: text,
            sections: Vec::new(),
        }
    }

    /// Run one model step: call the backend on the running transcript,
    /// parse the marker, and emit the matching protocol traffic. Requests
    /// beyond the caps are suppressed; the step cap finishes the agent.
    pub fn step(
        &mut self,
        tick: u64,
        call: ModelCall<'_>,
    ) -> Result<(Heartbeat, Option<SteeringRequest>), AgentError> {
        let mut request = None;
        if !self.finished && self.steps_run < LLM_AGENT_MAX_STEPS {
            let output = call
                .backend
                .complete(&self.agent_prompt(), call.params, call.vocab)?;
            let may_request = enforce_llm_agent_limits(self.requests_made, self.steps_run);
            self.steps_run += 1;
            self.transcript.push(output.clone());
            match extract_marker(&output)? {
                MarkerEvent::Steer(question) if may_request => {
                    self.requests_made += 1;
                    request = Some(SteeringRequest {
                        agent_id: self.agent_id.clone(),
                        context: output,
                        question,
                        blocking: true,
                        urgency: Urgency::Medium,
                        issued_tick: tick,
                    });
                }
                MarkerEvent::Steer(_) => {}
                MarkerEvent::Done => self.finished = true,
                MarkerEvent::None => {}
            }
            if self.steps_run >= LLM_AGENT_MAX_STEPS {
                self.finished = true;
            }
        }

        let status = if self.finished {
            AgentStatus::Complete
        } else if request.is_some() {
            AgentStatus::Blocked
        } else {
            AgentStatus::Running
        };
        let heartbeat = Heartbeat {
            agent_id: self.agent_id.clone(),
            status,
            task: self.task_description.clone(),
            last_output_summary: format!("{}/{LLM_AGENT_MAX_STEPS} steps done", self.steps_run),
            urgency: if request.is_some() {
                Urgency::Medium
            } else {
                Urgency::Low
            },
            tick,
        };
        Ok((heartbeat, request))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Backend, BackendKind, CompletionParams};
    use crate::metrics::contains_keyword;
    use rand::SeedableRng;
    use proptest::prelude::*;

    fn minimal_json() -> String {
        r#"{
            "scenario_id": "mini",
            "total_steps": 10,
            "agents": [
                {
                    "agent_id": "a1",
                    "domain_label": "demo",
                    "task_description": "walk the demo path",
                    "decisions": [
                        {
                            "step": 2,
                            "question": "left or right at the fork?",
                            "context_excerpt": "fork ahead; leaning westward westward westward",
                            "urgency": "MEDIUM",
                            "blocking": true,
                            "expected_keywords": ["westward"],
                            "default_path": "keep walking straight"
                        }
                    ]
                }
            ],
            "user_messages": [{"tick": 3, "text": "any progress?"}]
        }"#
        .to_string()
    }

    #[test]
    fn parses_and_validates_a_minimal_scenario() {
        let s = parse_scenario(&minimal_json(), "test").unwrap();
        assert_eq!(s.scenario_id, "mini");
        assert_eq!(s.n_agents(), 1);
        assert_eq!(s.total_decisions(), 1);
        assert_eq!(s.agents[0].decisions[0].urgency, Urgency::Medium);
    }

    #[test]
    fn rejects_duplicate_agent_ids() {
        let json = minimal_json().replace(
            r#""agents": ["#,
            r#""agents": [
                {
                    "agent_id": "a1",
                    "domain_label": "other",
                    "task_description": "another path",
                    "decisions": [
                        {
                            "step": 1,
                            "question": "start now?",
                            "context_excerpt": "ready ready ready",
                            "urgency": "LOW",
                            "blocking": false,
                            "expected_keywords": ["ready"],
                            "default_path": "wait"
                        }
                    ]
                },"#,
        );
        let err = parse_scenario(&json, "test").unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn rejects_structural_defects_with_field_paths() {
        let cases = [
            (
                minimal_json().replace("\"step\": 2", "\"step\": 0"),
                "decisions[0].step",
            ),
            (
                minimal_json().replace("\"step\": 2", "\"step\": 99"),
                "exceeds total_steps",
            ),
            (
                minimal_json().replace("[\"westward\"]", "[]"),
                "expected_keywords",
            ),
            (
                minimal_json().replace("\"tick\": 3", "\"tick\": 0"),
                "user_messages[0].tick",
            ),
            (
                minimal_json().replace("\"total_steps\": 10", "\"total_steps\": 0"),
                "total_steps",
            ),
        ];
        for (json, needle) in cases {
            let err = parse_scenario(&json, "test").unwrap_err();
            assert!(err.to_string().contains(needle), "{err} missing {needle}");
        }
    }

    #[test]
    fn rejects_unknown_fields() {
        let json = minimal_json().replace("\"scenario_id\"", "\"typo_field\": 1, \"scenario_id\"");
        assert!(parse_scenario(&json, "test").is_err());
    }

    #[test]
    fn rejects_unsorted_steps() {
        let json = minimal_json().replace(
            r#""decisions": ["#,
            r#""decisions": [
                {
                    "step": 5,
                    "question": "early ask?",
                    "context_excerpt": "warmup warmup warmup",
                    "urgency": "LOW",
                    "blocking": false,
                    "expected_keywords": ["warmup"],
                    "default_path": "skip"
                },"#,
        );
        let err = parse_scenario(&json, "test").unwrap_err();
        assert!(err.to_string().contains("strictly increase"), "{err}");
    }

    #[test]
    fn load_scenario_reads_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mini.json");
        std::fs::write(&path, minimal_json()).unwrap();
        let s = load_scenario(&path).unwrap();
        assert_eq!(s.scenario_id, "mini");

        let missing = load_scenario(&dir.path().join("absent.json")).unwrap_err();
        assert!(matches!(missing, ScenarioError::Io { .. }));
    }

    #[test]
    fn builtin_scenarios_parse_with_published_shapes() {
        // (name, agents, total decisions)
        let expected = [
            ("s1_n3", 3, 15),
            ("s2_n5", 5, 15),
            ("s3_n10", 10, 30),
            ("s4_n3_homogeneous", 3, 12),
            ("s5_n5_crossfire", 5, 20),
            ("s6_n5_cascade", 5, 15),
            ("s7_n5_dense_d2", 5, 40),
            ("s8_n3_dense_d3", 3, 45),
        ];
        for (name, n, decisions) in expected {
            let s = resolve_scenario(name).unwrap();
            assert_eq!(s.n_agents(), n, "{name} agent count");
            assert_eq!(s.total_decisions(), decisions, "{name} decision count");
        }
        assert!(matches!(
            resolve_scenario("s99_missing"),
            Err(ScenarioError::UnknownScenario { .. })
        ));
    }

    #[test]
    fn crossfire_is_disjoint_and_homogeneous_overlaps() {
        let crossfire = resolve_scenario("s5_n5_crossfire").unwrap();
        assert!(keyword_disjointness(&crossfire).is_disjoint());

        let homogeneous = resolve_scenario("s4_n3_homogeneous").unwrap();
        assert!(!keyword_disjointness(&homogeneous).is_disjoint());

        // Every other builtin keeps agent vocabularies disjoint.
        for name in ["s1_n3", "s2_n5", "s3_n10", "s6_n5_cascade", "s7_n5_dense_d2", "s8_n3_dense_d3"] {
            let s = resolve_scenario(name).unwrap();
            assert!(
                keyword_disjointness(&s).is_disjoint(),
                "{name} should be disjoint"
            );
        }
    }

    /// The causal hygiene the mock experiments rely on: keywords live only
    /// in context excerpts (and answers derived from them), never in the
    /// prose that reaches every prompt through registry lines or history
    /// questions. Excerpts carry their own decision's lead keyword.
    #[test]
    fn builtin_fixtures_keep_keywords_out_of_shared_prose() {
        for (name, _) in BUILTIN_SCENARIOS {
            let s = resolve_scenario(name).unwrap();
            let vocab = s.vocab();
            let mut prose: Vec<String> = Vec::new();
            for agent in &s.agents {
                prose.push(agent.agent_id.clone());
                prose.push(agent.domain_label.clone());
                prose.push(agent.task_description.clone());
                for d in &agent.decisions {
                    prose.push(d.question.clone());
                    prose.push(d.default_path.clone());
                }
            }
            for m in &s.user_messages {
                prose.push(m.text.clone());
            }
            for (agent_id, keywords) in vocab.all_keywords() {
                for kw in keywords {
                    for text in &prose {
                        assert!(
                            !contains_keyword(text, kw),
                            "{name}: keyword {kw} of {agent_id} leaks into prose: {text}"
                        );
                    }
                }
            }

            // Excerpts carry their own lead keyword, three occurrences.
            for agent in &s.agents {
                for (di, d) in agent.decisions.iter().enumerate() {
                    let lead = &d.expected_keywords[0];
                    assert!(
                        crate::metrics::keyword_match_count(&d.context_excerpt, lead) >= 3,
                        "{name}: {} decision {di} excerpt lacks 3x lead keyword {lead}",
                        agent.agent_id
                    );
                }
            }

            // Outside the homogeneous scenario, excerpts stay within their
            // own agent's vocabulary.
            if name != "s4_n3_homogeneous" {
                for agent in &s.agents {
                    for d in &agent.decisions {
                        for (other_id, keywords) in vocab.all_keywords() {
                            if other_id == &agent.agent_id {
                                continue;
                            }
                            for kw in keywords {
                                assert!(
                                    !contains_keyword(&d.context_excerpt, kw),
                                    "{name}: excerpt of {} contains {other_id}'s keyword {kw}",
                                    agent.agent_id
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn authored_schedule_fires_each_decision_at_its_step() {
        let s = parse_scenario(&minimal_json(), "test").unwrap();
        let mut run = ScriptedAgentRun::new_authored(&s.agents[0]);
        let (hb, req) = run.step(1);
        assert_eq!(hb.status, AgentStatus::Running);
        assert!(req.is_none());

        let (hb, req) = run.step(2);
        let (idx, req) = req.expect("decision fires at step 2");
        assert_eq!(idx, 0);
        assert_eq!(req.question, "left or right at the fork?");
        assert_eq!(req.urgency, Urgency::Medium);
        assert_eq!(hb.status, AgentStatus::Blocked);

        run.mark_answered(0);
        let (hb, req) = run.step(3);
        assert!(req.is_none());
        assert_eq!(hb.status, AgentStatus::Complete);
        assert!(hb.last_output_summary.starts_with("1/1"));
    }

    #[test]
    fn sampled_schedules_are_seed_deterministic_and_fire_every_decision() {
        let s = resolve_scenario("s1_n3").unwrap();
        let agent = &s.agents[0];
        let mut rng_a = ChaCha8Rng::seed_from_u64(7);
        let mut rng_b = ChaCha8Rng::seed_from_u64(7);
        let run_a = ScriptedAgentRun::new_sampled(agent, s.total_steps, &mut rng_a);
        let run_b = ScriptedAgentRun::new_sampled(agent, s.total_steps, &mut rng_b);
        assert_eq!(run_a.schedule(), run_b.schedule());

        let mut rng_c = ChaCha8Rng::seed_from_u64(8);
        let run_c = ScriptedAgentRun::new_sampled(agent, s.total_steps, &mut rng_c);
        assert_ne!(run_a.schedule(), run_c.schedule(), "different seed, different schedule");

        let mut run = run_a;
        let mut fired = Vec::new();
        for tick in 1..=s.total_steps {
            let (_, req) = run.step(tick);
            if let Some((idx, req)) = req {
                fired.push(idx);
                run.mark_answered(idx);
                assert_eq!(req.issued_tick, tick);
            }
        }
        assert_eq!(fired, (0..agent.decisions.len()).collect::<Vec<_>>());
        assert!(run.is_complete());
    }

    #[test]
    fn marker_grammar_handles_all_cases() {
        assert_eq!(
            extract_marker("thinking… [[STEER: BFS or DFS for cycle detection?]]").unwrap(),
            MarkerEvent::Steer("BFS or DFS for cycle detection?".to_string())
        );
        assert_eq!(
            extract_marker("final answer [[DONE]]").unwrap(),
            MarkerEvent::Done
        );
        assert_eq!(extract_marker("no markers here").unwrap(), MarkerEvent::None);
        assert_eq!(
            extract_marker("[[DONE]] but wait [[STEER: really?]]").unwrap(),
            MarkerEvent::Steer("really?".to_string()),
            "steer wins over done"
        );
        assert!(matches!(
            extract_marker("oops [[STEER: no close"),
            Err(AgentError::MalformedMarker)
        ));
    }

    #[test]
    fn llm_limits_deny_at_caps() {
        assert!(enforce_llm_agent_limits(0, 0));
        assert!(enforce_llm_agent_limits(2, 11));
        assert!(!enforce_llm_agent_limits(3, 5));
        assert!(!enforce_llm_agent_limits(2, 12));
    }

    /// Backend that replays a fixed list of outputs.
    struct ScriptedBackend {
        outputs: std::sync::Mutex<std::collections::VecDeque<String>>,
    }

    impl ScriptedBackend {
        fn new(outputs: &[&str]) -> Self {
            ScriptedBackend {
                outputs: std::sync::Mutex::new(outputs.iter().map(|s| s.to_string()).collect()),
            }
        }
    }

    impl Backend for ScriptedBackend {
        fn kind(&self) -> BackendKind {
            BackendKind::Http
        }
        fn complete(
            &self,
            _: &BuiltContext,
            _: &CompletionParams,
            _: &ScenarioVocab,
        ) -> Result<String, BackendError> {
            self.outputs
                .lock()
                .unwrap()
                .pop_front()
                .ok_or(BackendError::BackendUnavailable {
                    reason: "script exhausted".to_string(),
                })
        }
    }

    #[test]
    fn llm_agent_loop_routes_markers_and_respects_caps() {
        let backend = ScriptedBackend::new(&[
            "exploring the task [[STEER: which direction first?]]",
            "continuing [[STEER: second ask]]",
            "more work [[STEER: third ask]]",
            "pushing on [[STEER: fourth ask must be suppressed]]",
            "wrapping up [[DONE]]",
        ]);
        let params = CompletionParams::default();
        let vocab = ScenarioVocab::new();
        let call = ModelCall {
            backend: &backend,
            params: &params,
            vocab: &vocab,
        };
        let mut agent = LlmAgentLoop::new("live1", "chart a course");

        let mut requests = 0;
        for tick in 1..=5 {
            let (_, req) = agent.step(tick, call).unwrap();
            if let Some(req) = req {
                requests += 1;
                agent.record_answer(&format!("answer to: {}", req.question));
            }
        }
        assert_eq!(requests, 3, "fourth request is suppressed by the cap");
        assert!(agent.is_finished());
        assert_eq!(agent.requests_made(), 3);

        // A finished agent steps without calling the backend.
        let (hb, req) = agent.step(6, call).unwrap();
        assert_eq!(hb.status, AgentStatus::Complete);
        assert!(req.is_none());
    }

    #[test]
    fn llm_agent_stops_at_step_cap() {
        let outputs: Vec<String> = (0..LLM_AGENT_MAX_STEPS)
            .map(|i| format!("still going {i}"))
            .collect();
        let refs: Vec<&str> = outputs.iter().map(String::as_str).collect();
        let backend = ScriptedBackend::new(&refs);
        let params = CompletionParams::default();
        let vocab = ScenarioVocab::new();
        let call = ModelCall {
            backend: &backend,
            params: &params,
            vocab: &vocab,
        };
        let mut agent = LlmAgentLoop::new("live2", "never-ending task");
        for tick in 1..=u64::from(LLM_AGENT_MAX_STEPS) {
            agent.step(tick, call).unwrap();
        }
        assert!(agent.is_finished(), "step cap finishes the agent");
        assert_eq!(agent.steps_run(), LLM_AGENT_MAX_STEPS);
    }

    proptest! {
        #[test]
        fn no_brackets_means_no_marker(text in "[^\\[]{0,80}") {
            prop_assert_eq!(extract_marker(&text).unwrap(), MarkerEvent::None);
        }

        #[test]
        fn sampled_schedule_is_distinct_sorted_in_range(
            seed in 0u64..1000, k in 1usize..10, extra in 0u64..50,
        ) {
            let decisions: Vec<DecisionPoint> = (0..k)
                .map(|i| DecisionPoint {
                    step: i as u64 + 1,
                    question: format!("ask {i}?"),
                    context_excerpt: "probe probe probe".to_string(),
                    urgency: Urgency::Medium,
                    blocking: true,
                    expected_keywords: vec!["probe".to_string()],
                    default_path: "carry on".to_string(),
                })
                .collect();
            let agent = ScenarioAgent {
                agent_id: "p1".to_string(),
                domain_label: "prop".to_string(),
                task_description: "property task".to_string(),
                decisions,
            };
            let total_steps = k as u64 + extra;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let run = ScriptedAgentRun::new_sampled(&agent, total_steps, &mut rng);
            let schedule = run.schedule();
            prop_assert_eq!(schedule.len(), k);
            for w in schedule.windows(2) {
                prop_assert!(w[0] < w[1], "strictly ascending, distinct");
            }
            prop_assert!(*schedule.first().unwrap() >= 1);
            prop_assert!(*schedule.last().unwrap() <= total_steps);
        }
    }
}
