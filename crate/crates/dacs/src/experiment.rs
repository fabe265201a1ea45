//! Trial orchestration: run scenario × condition × trials, write per-trial
//! structured logs and the lock-protected summary file, and produce
//! comparison reports.
//!
//! A trial is a deterministic discrete-event simulation over logical ticks.
//! Each tick: agents heartbeat and fire scripted decisions (lexicographic
//! agent order), requests reach the orchestrator (DACS) or are answered
//! immediately from a flat concatenated prompt (FLAT), user messages come
//! in, and then sessions run until the orchestrator is back at rest. All
//! randomness flows from one per-trial seed, so identical configurations
//! replay byte-identical logs; wall-clock time appears only in the batch
//! manifest.

use std::collections::{BTreeMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::os::unix::io::AsRawFd;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{resolve_scenario, Scenario, ScenarioError, ScriptedAgentRun};
use crate::backend::{
    Backend, BackendError, BackendKind, CompletionParams, HttpBackend, MockContaminator,
    MockOracle, ScenarioVocab, API_KEY_ENV,
};
use crate::context::{
    build_flat_context, build_focus_context, build_user_context, BuilderConfig, ContextError,
    FocusRecord,
};
use crate::metrics::{
    score_accuracy, score_contamination, trial_summary, InteractionScore, MetricsError,
};
use crate::orchestrator::{
    run_steering_session, Action, Event, EventKind, ModelCall, Orchestrator, OrchestratorError,
    OrchestratorState, SessionError,
};
use crate::protocols::SteeringRequest;
use crate::registry::Registry;
use crate::stats::{efficiency_ratio, mean_se, welch_t, StatsError, WelchResult};
use crate::tokenizer::TokenCount;

/// Summary CSV header, written exactly once per file.
pub const SUMMARY_HEADER: &str =
    "scenario_id,condition,trial_id,accuracy,contamination,avg_context_tokens,n_interactions,seed";
/// Default summary file name inside the output directory.
pub const SUMMARY_FILE: &str = "summary.csv";
/// Column names for the machine-readable report row.
pub const REPORT_MACHINE_HEADER: &str = "scenario_id,dacs_trials,flat_trials,\
dacs_accuracy_mean,dacs_accuracy_se,flat_accuracy_mean,flat_accuracy_se,\
dacs_contamination_mean,dacs_contamination_se,flat_contamination_mean,flat_contamination_se,\
dacs_tokens_mean,dacs_tokens_se,flat_tokens_mean,flat_tokens_se,\
delta_accuracy,efficiency_ratio,welch_t,welch_df,welch_p";

/// How the trial-seed mixer derives per-trial seeds; echoed in the manifest.
pub const SEED_MIXER: &str =
    "splitmix64 finalizer over base_seed + (trial_index + 1) * 0x9E3779B97F4A7C15";

const LOCK_TIMEOUT: Duration = Duration::from_secs(10);
const LOCK_RETRY: Duration = Duration::from_millis(10);
/// Extra ticks past the scripted horizon for deferred-batch draining.
const DRAIN_TICK_ALLOWANCE: u64 = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Condition {
    Dacs,
    Flat,
}

impl Condition {
    /// Lowercase tag used in file names.
    pub fn file_tag(self) -> &'static str {
        match self {
            Condition::Dacs => "dacs",
            Condition::Flat => "flat",
        }
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Condition::Dacs => "DACS",
            Condition::Flat => "FLAT",
        })
    }
}

impl std::str::FromStr for Condition {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dacs" => Ok(Condition::Dacs),
            "flat" => Ok(Condition::Flat),
            other => Err(format!("unknown condition {other:?} (expected dacs or flat)")),
        }
    }
}

/// Which prompt shape produced a logged backend call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CallMode {
    /// Monitoring mode; never places backend calls, present for schema
    /// completeness.
    Registry,
    Focus,
    UserInteract,
    FlatCall,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    /// Builtin scenario name or path to a scenario file.
    pub scenario: String,
    pub condition: Condition,
    pub trials: u32,
    pub seed: u64,
    pub backend: BackendKind,
    pub budget: TokenCount,
    pub output_dir: PathBuf,
    pub params: CompletionParams,
}

/// One backend call, fully logged: the prompt that went in, the text that
/// came back, and how the call was scored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: u32,
    pub scenario_id: String,
    pub condition: Condition,
    /// 1-based ordinal of this call within the trial.
    pub step: u64,
    pub mode: CallMode,
    pub focused_agent: Option<String>,
    pub context_tokens: TokenCount,
    pub prompt_text: String,
    pub response_text: String,
    pub accurate: bool,
    pub contaminated: bool,
    /// Logical tick at which the call was placed.
    pub tick: u64,
}

/// One trial's aggregate line in the summary CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario_id: String,
    pub condition: Condition,
    pub trial_id: u32,
    pub accuracy: f64,
    pub contamination: f64,
    pub avg_context_tokens: f64,
    pub n_interactions: u64,
    /// The derived per-trial seed (see [`SEED_MIXER`]).
    pub seed: u64,
}

impl SummaryRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.scenario_id,
            self.condition,
            self.trial_id,
            self.accuracy,
            self.contamination,
            self.avg_context_tokens,
            self.n_interactions,
            self.seed
        )
    }

    pub fn from_csv_line(line: &str, line_no: usize) -> Result<Self, ExperimentError> {
        let bad = |detail: &str| ExperimentError::SummaryMalformed {
            line: line_no,
            detail: detail.to_string(),
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(bad(&format!("expected 8 fields, found {}", fields.len())));
        }
        let condition = match fields[1] {
            "DACS" => Condition::Dacs,
            "FLAT" => Condition::Flat,
            other => return Err(bad(&format!("unknown condition {other:?}"))),
        };
        Ok(SummaryRow {
            scenario_id: fields[0].to_string(),
            condition,
            trial_id: fields[2].parse().map_err(|_| bad("trial_id not an integer"))?,
            accuracy: fields[3].parse().map_err(|_| bad("accuracy not a number"))?,
            contamination: fields[4]
                .parse()
                .map_err(|_| bad("contamination not a number"))?,
            avg_context_tokens: fields[5]
                .parse()
                .map_err(|_| bad("avg_context_tokens not a number"))?,
            n_interactions: fields[6]
                .parse()
                .map_err(|_| bad("n_interactions not an integer"))?,
            seed: fields[7].parse().map_err(|_| bad("seed not an integer"))?,
        })
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("batch aborted: {reason}")]
    BatchAborted { reason: String },
    #[error("report incomplete: {detail}")]
    ReportIncomplete { detail: String },
    #[error("summary file malformed at line {line}: {detail}")]
    SummaryMalformed { line: usize, detail: String },
    #[error("trial stalled: {detail}")]
    TrialStalled { detail: String },
    #[error("invalid run configuration: {detail}")]
    Config { detail: String },
}

fn io_err(path: &Path, source: std::io::Error) -> ExperimentError {
    ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Derive an independent, reproducible seed for one trial (see
/// [`SEED_MIXER`]).
pub fn trial_seed(base_seed: u64, trial_index: u32) -> u64 {
    let mut z = base_seed
        .wrapping_add((u64::from(trial_index) + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Instantiate the configured backend.
pub fn make_backend(
    kind: BackendKind,
    params: &CompletionParams,
) -> Result<Box<dyn Backend>, ExperimentError> {
    match kind {
        BackendKind::MockOracle => Ok(Box::new(MockOracle)),
        BackendKind::MockContaminator => Ok(Box::new(MockContaminator)),
        BackendKind::Http => {
            let backend = match &params.endpoint {
                Some(endpoint) => {
                    let key = std::env::var(API_KEY_ENV)
                        .map_err(|_| BackendError::MissingApiKey)?;
                    HttpBackend::new(key, endpoint.clone())
                }
                None => HttpBackend::from_env()?,
            };
            Ok(Box::new(backend))
        }
    }
}

/// Everything one in-flight trial owns.
struct TrialDriver<'a> {
    scenario: &'a Scenario,
    condition: Condition,
    trial_id: u32,
    cfg: BuilderConfig,
    backend: &'a dyn Backend,
    params: &'a CompletionParams,
    vocab: ScenarioVocab,
    registry: Registry,
    focus: BTreeMap<String, FocusRecord>,
    runs: BTreeMap<String, ScriptedAgentRun>,
    orch: Orchestrator,
    /// (agent_id, issued_tick) -> decision index; each agent fires at most
    /// one decision per tick, so the key is unique.
    decision_of: BTreeMap<(String, u64), usize>,
    /// Texts carried by AnswerUser actions, consumed in FIFO order.
    pending_user_answers: VecDeque<String>,
    scores: Vec<InteractionScore>,
    writer: BufWriter<File>,
    log_path: PathBuf,
    seq: u64,
    steering_records: u64,
}

impl<'a> TrialDriver<'a> {
    fn absorb(&mut self, actions: Vec<Action>) {
        for action in actions {
            if let Action::AnswerUser(text) = action {
                self.pending_user_answers.push_back(text);
            }
        }
    }

    /// Assign the next interaction ordinal and append one JSONL line.
    fn log_call(&mut self, mut record: TrialRecord) -> Result<(), ExperimentError> {
        self.seq += 1;
        record.step = self.seq;
        let line =
            serde_json::to_string(&record).expect("trial records always serialize to JSON");
        writeln!(self.writer, "{line}").map_err(|e| io_err(&self.log_path, e))
    }

    /// Answer one steering request through a focus session (DACS path).
    fn answer_focus(&mut self, req: &SteeringRequest, tick: u64) -> Result<(), ExperimentError> {
        let idx = *self
            .decision_of
            .get(&(req.agent_id.clone(), req.issued_tick))
            .expect("every delivered request was mapped to its decision");
        let keywords = self.runs[&req.agent_id].decision(idx).expected_keywords.clone();
        self.vocab.set_current(&req.agent_id, keywords.clone());

        let record = self
            .focus
            .get_mut(&req.agent_id)
            .expect("every scenario agent has a focus record");
        record.partial_output_summary = req.context.clone();
        // Same construction the session performs; kept for the log, since
        // the response carries only the token count.
        let prompt = build_focus_context(
            &req.agent_id,
            &record.with_pending_question(&req.question),
            &self.registry,
            &self.cfg,
        )?;
        let call = ModelCall {
            backend: self.backend,
            params: self.params,
            vocab: &self.vocab,
        };
        let response = run_steering_session(req, record, &self.registry, &self.cfg, call, tick)?;
        assert_eq!(
            response.context_tokens_at_call, prompt.token_count,
            "logged prompt must be the prompt the session sent"
        );

        let accurate = score_accuracy(&response.response_text, &keywords);
        let contaminated = score_contamination(
            &response.response_text,
            &self.vocab.others_keywords(&req.agent_id),
        );
        self.runs
            .get_mut(&req.agent_id)
            .expect("request agent exists")
            .mark_answered(idx);
        self.steering_records += 1;
        self.scores.push(InteractionScore {
            agent_id: req.agent_id.clone(),
            accurate,
            contaminated,
            context_tokens: response.context_tokens_at_call,
            step: self.seq + 1,
        });
        self.log_call(TrialRecord {
            trial_id: self.trial_id,
            scenario_id: self.scenario.scenario_id.clone(),
            condition: self.condition,
            step: 0,
            mode: CallMode::Focus,
            focused_agent: Some(req.agent_id.clone()),
            context_tokens: response.context_tokens_at_call,
            prompt_text: prompt.full_text,
            response_text: response.response_text,
            accurate,
            contaminated,
            tick,
        })
    }

    /// Answer one steering request from the flat concatenated prompt (FLAT
    /// path): no mode switching, every agent's record in one context.
    fn answer_flat(&mut self, req: &SteeringRequest, tick: u64) -> Result<(), ExperimentError> {
        let idx = *self
            .decision_of
            .get(&(req.agent_id.clone(), req.issued_tick))
            .expect("every delivered request was mapped to its decision");
        let keywords = self.runs[&req.agent_id].decision(idx).expected_keywords.clone();
        self.vocab.set_current(&req.agent_id, keywords.clone());
        self.focus
            .get_mut(&req.agent_id)
            .expect("every scenario agent has a focus record")
            .partial_output_summary = req.context.clone();

        let mut with_question = self.focus.clone();
        let target = with_question
            .get_mut(&req.agent_id)
            .expect("target record present");
        *target = target.with_pending_question(&req.question);
        let prompt = build_flat_context(&req.agent_id, &with_question, &self.registry, &self.cfg)?;
        let response_text = self.backend.complete(&prompt, self.params, &self.vocab)?;
        self.focus
            .get_mut(&req.agent_id)
            .expect("target record present")
            .steering_history
            .push((req.question.clone(), response_text.clone()));

        let accurate = score_accuracy(&response_text, &keywords);
        let contaminated = score_contamination(
            &response_text,
            &self.vocab.others_keywords(&req.agent_id),
        );
        self.runs
            .get_mut(&req.agent_id)
            .expect("request agent exists")
            .mark_answered(idx);
        self.steering_records += 1;
        self.scores.push(InteractionScore {
            agent_id: req.agent_id.clone(),
            accurate,
            contaminated,
            context_tokens: prompt.token_count,
            step: self.seq + 1,
        });
        self.log_call(TrialRecord {
            trial_id: self.trial_id,
            scenario_id: self.scenario.scenario_id.clone(),
            condition: self.condition,
            step: 0,
            mode: CallMode::FlatCall,
            focused_agent: Some(req.agent_id.clone()),
            context_tokens: prompt.token_count,
            prompt_text: prompt.full_text,
            response_text,
            accurate,
            contaminated,
            tick,
        })
    }

    /// Answer a user message from the monitoring context (both conditions).
    fn answer_user(&mut self, text: &str, tick: u64) -> Result<(), ExperimentError> {
        let prompt = build_user_context(&self.registry, text, &self.cfg);
        let response_text = self.backend.complete(&prompt, self.params, &self.vocab)?;
        // A user answer has no ground-truth keyword; it is contaminated if
        // ANY agent's vocabulary leaks into it (empty target matches no id,
        // so every agent counts as "other").
        let contaminated = score_contamination(&response_text, &self.vocab.others_keywords(""));
        self.log_call(TrialRecord {
            trial_id: self.trial_id,
            scenario_id: self.scenario.scenario_id.clone(),
            condition: self.condition,
            step: 0,
            mode: CallMode::UserInteract,
            focused_agent: None,
            context_tokens: prompt.token_count,
            prompt_text: prompt.full_text,
            response_text,
            accurate: true,
            contaminated,
            tick,
        })
    }

    /// Run queued focus sessions and user interactions until the
    /// orchestrator is back in its monitoring state.
    fn session_loop(&mut self, tick: u64) -> Result<(), ExperimentError> {
        loop {
            match self.orch.state().clone() {
                OrchestratorState::Registry => return Ok(()),
                OrchestratorState::UserInteract => {
                    let text = self.pending_user_answers.pop_front().ok_or_else(|| {
                        ExperimentError::TrialStalled {
                            detail: "user-interact state without a pending message".to_string(),
                        }
                    })?;
                    self.answer_user(&text, tick)?;
                    let actions = self
                        .orch
                        .handle_event(Event::new(tick, EventKind::UserInteractDone), &self.registry)?;
                    self.absorb(actions);
                }
                OrchestratorState::Focus(_) => {
                    let req = self.orch.current_request().cloned().ok_or_else(|| {
                        ExperimentError::TrialStalled {
                            detail: "focus state without a current request".to_string(),
                        }
                    })?;
                    self.answer_focus(&req, tick)?;
                    let actions = self
                        .orch
                        .handle_event(Event::new(tick, EventKind::SteeringComplete), &self.registry)?;
                    self.absorb(actions);
                }
            }
        }
    }

    /// One logical tick: heartbeats, deliveries, user messages, sessions,
    /// batch timers.
    fn tick_phase(
        &mut self,
        tick: u64,
        users: &BTreeMap<u64, Vec<String>>,
    ) -> Result<(), ExperimentError> {
        let mut arrivals = Vec::new();
        for run in self.runs.values_mut() {
            let (heartbeat, fired) = run.step(tick);
            self.registry.upsert(&heartbeat);
            if let Some(arrival) = fired {
                arrivals.push(arrival);
            }
        }

        for (idx, req) in arrivals {
            self.decision_of
                .insert((req.agent_id.clone(), req.issued_tick), idx);
            match self.condition {
                Condition::Dacs => {
                    let actions = self.orch.handle_event(
                        Event::new(tick, EventKind::SteeringRequestArrived(req)),
                        &self.registry,
                    )?;
                    self.absorb(actions);
                }
                Condition::Flat => self.answer_flat(&req, tick)?,
            }
        }

        if let Some(texts) = users.get(&tick) {
            for text in texts {
                match self.condition {
                    Condition::Dacs => {
                        let actions = self.orch.handle_event(
                            Event::new(tick, EventKind::UserMessage(text.clone())),
                            &self.registry,
                        )?;
                        self.absorb(actions);
                    }
                    Condition::Flat => self.answer_user(text, tick)?,
                }
            }
        }

        if self.condition == Condition::Dacs {
            self.session_loop(tick)?;
            let actions = self
                .orch
                .handle_event(Event::new(tick, EventKind::Tick), &self.registry)?;
            self.absorb(actions);
            self.session_loop(tick)?;
        }
        Ok(())
    }

    fn finished(&self) -> bool {
        self.runs.values().all(ScriptedAgentRun::is_complete)
            && (self.condition == Condition::Flat || self.orch.is_quiescent())
    }

    fn drive(&mut self) -> Result<(), ExperimentError> {
        let mut users: BTreeMap<u64, Vec<String>> = BTreeMap::new();
        for m in &self.scenario.user_messages {
            users.entry(m.tick).or_default().push(m.text.clone());
        }
        let horizon = self.scenario.total_steps;
        for tick in 1..=horizon {
            self.tick_phase(tick, &users)?;
        }
        // Deferred batches flush on age; keep ticking until nothing is
        // pending anywhere.
        let empty = BTreeMap::new();
        let mut tick = horizon;
        while !self.finished() {
            tick += 1;
            if tick > horizon + DRAIN_TICK_ALLOWANCE {
                return Err(ExperimentError::TrialStalled {
                    detail: format!(
                        "work still pending {DRAIN_TICK_ALLOWANCE} ticks past the horizon"
                    ),
                });
            }
            self.tick_phase(tick, &empty)?;
        }
        let expected = self.scenario.total_decisions() as u64;
        if self.steering_records != expected {
            return Err(ExperimentError::TrialStalled {
                detail: format!(
                    "{} steering calls logged, scenario defines {expected}",
                    self.steering_records
                ),
            });
        }
        self.writer.flush().map_err(|e| io_err(&self.log_path, e))
    }
}

/// Run one trial: resolves the scenario and backend from the configuration.
pub fn run_trial(
    cfg: &RunConfig,
    trial_index: u32,
) -> Result<(SummaryRow, PathBuf), ExperimentError> {
    let scenario = resolve_scenario(&cfg.scenario)?;
    let backend = make_backend(cfg.backend, &cfg.params)?;
    run_trial_with(&scenario, backend.as_ref(), cfg, trial_index)
}

/// Trial body shared by [`run_trial`] and [`run_batch`].
pub fn run_trial_with(
    scenario: &Scenario,
    backend: &dyn Backend,
    cfg: &RunConfig,
    trial_index: u32,
) -> Result<(SummaryRow, PathBuf), ExperimentError> {
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| io_err(&cfg.output_dir, e))?;
    let seed = trial_seed(cfg.seed, trial_index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Sampling consumes the RNG in the scenario's declared agent order.
    let mut runs = BTreeMap::new();
    for agent in &scenario.agents {
        runs.insert(
            agent.agent_id.clone(),
            ScriptedAgentRun::new_sampled(agent, scenario.total_steps, &mut rng),
        );
    }
    let focus = scenario
        .agents
        .iter()
        .map(|a| {
            (
                a.agent_id.clone(),
                FocusRecord::new(&a.agent_id, &a.task_description),
            )
        })
        .collect();

    let log_path = cfg.output_dir.join(format!(
        "{}_{}_t{}.jsonl",
        scenario.scenario_id,
        cfg.condition.file_tag(),
        trial_index
    ));
    let file = File::create(&log_path).map_err(|e| io_err(&log_path, e))?;

    let mut driver = TrialDriver {
        scenario,
        condition: cfg.condition,
        trial_id: trial_index,
        cfg: BuilderConfig::new(cfg.budget),
        backend,
        params: &cfg.params,
        vocab: scenario.vocab(),
        registry: Registry::new(),
        focus,
        runs,
        orch: Orchestrator::new(),
        decision_of: BTreeMap::new(),
        pending_user_answers: VecDeque::new(),
        scores: Vec::new(),
        writer: BufWriter::new(file),
        log_path: log_path.clone(),
        seq: 0,
        steering_records: 0,
    };
    driver.drive()?;

    let (accuracy, contamination, avg_context_tokens) = trial_summary(&driver.scores)?;
    let row = SummaryRow {
        scenario_id: scenario.scenario_id.clone(),
        condition: cfg.condition,
        trial_id: trial_index,
        accuracy,
        contamination,
        avg_context_tokens,
        n_interactions: driver.steering_records,
        seed,
    };
    Ok((row, log_path))
}

/// Append one row under an exclusive advisory lock; writes the header first
/// if the file is empty. The header check happens under the lock, so
/// concurrent writers produce exactly one header.
pub fn append_summary_row(path: &Path, row: &SummaryRow) -> Result<(), ExperimentError> {
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    let fd = file.as_raw_fd();
    let deadline = Instant::now() + LOCK_TIMEOUT;
    loop {
        if unsafe { libc::flock(fd, libc::LOCK_EX | libc::LOCK_NB) } == 0 {
            break;
        }
        let err = std::io::Error::last_os_error();
        if err.raw_os_error() != Some(libc::EWOULDBLOCK) {
            return Err(io_err(path, err));
        }
        if Instant::now() >= deadline {
            return Err(ExperimentError::BatchAborted {
                reason: format!(
                    "could not lock {} within {LOCK_TIMEOUT:?}",
                    path.display()
                ),
            });
        }
        std::thread::sleep(LOCK_RETRY);
    }
    let result = (|| {
        let mut chunk = String::new();
        if file.metadata().map_err(|e| io_err(path, e))?.len() == 0 {
            chunk.push_str(SUMMARY_HEADER);
            chunk.push('\n');
        }
        chunk.push_str(&row.to_csv_line());
        chunk.push('\n');
        (&file)
            .write_all(chunk.as_bytes())
            .map_err(|e| io_err(path, e))
    })();
    unsafe { libc::flock(fd, libc::LOCK_UN) };
    result
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    scenario_id: &'a str,
    condition: Condition,
    trials: u32,
    base_seed: u64,
    trial_seeds: Vec<u64>,
    seed_mixer: &'static str,
    backend: BackendKind,
    budget: TokenCount,
    model_name: &'a str,
    code_version: &'static str,
    created_unix_secs: u64,
}

/// What a batch produced: appended rows plus any per-trial failures (failed
/// trials append no summary row; their partial logs remain on disk).
#[derive(Debug)]
pub struct BatchOutcome {
    pub rows: Vec<SummaryRow>,
    pub failures: Vec<(u32, ExperimentError)>,
    pub summary_path: PathBuf,
    pub manifest_path: PathBuf,
}

/// Run all configured trials (parallel workers), appending each finished
/// trial's row to the shared summary file under the advisory lock.
pub fn run_batch(cfg: &RunConfig) -> Result<BatchOutcome, ExperimentError> {
    if cfg.trials == 0 {
        return Err(ExperimentError::Config {
            detail: "trials must be at least 1".to_string(),
        });
    }
    let scenario = resolve_scenario(&cfg.scenario)?;
    let backend = make_backend(cfg.backend, &cfg.params)?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| io_err(&cfg.output_dir, e))?;

    let manifest = Manifest {
        scenario_id: &scenario.scenario_id,
        condition: cfg.condition,
        trials: cfg.trials,
        base_seed: cfg.seed,
        trial_seeds: (0..cfg.trials).map(|i| trial_seed(cfg.seed, i)).collect(),
        seed_mixer: SEED_MIXER,
        backend: cfg.backend,
        budget: cfg.budget,
        model_name: &cfg.params.model_name,
        code_version: env!("CARGO_PKG_VERSION"),
        created_unix_secs: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
    };
    let manifest_path = cfg.output_dir.join(format!(
        "manifest_{}_{}_seed{}.json",
        scenario.scenario_id,
        cfg.condition.file_tag(),
        cfg.seed
    ));
    let manifest_json =
        serde_json::to_string_pretty(&manifest).expect("manifest always serializes");
    std::fs::write(&manifest_path, manifest_json + "\n")
        .map_err(|e| io_err(&manifest_path, e))?;

    let summary_path = cfg.output_dir.join(SUMMARY_FILE);
    let results: Vec<(u32, Result<SummaryRow, ExperimentError>)> = std::thread::scope(|scope| {
        let scenario = &scenario;
        let backend = backend.as_ref();
        let summary_path = &summary_path;
        let handles: Vec<_> = (0..cfg.trials)
            .map(|i| {
                scope.spawn(move || {
                    let outcome = run_trial_with(scenario, backend, cfg, i).and_then(
                        |(row, _log)| {
                            append_summary_row(summary_path, &row)?;
                            Ok(row)
                        },
                    );
                    (i, outcome)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("trial worker panicked"))
            .collect()
    });

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (i, outcome) in results {
        match outcome {
            Ok(row) => rows.push(row),
            Err(e @ ExperimentError::BatchAborted { .. }) => return Err(e),
            Err(e) => failures.push((i, e)),
        }
    }
    rows.sort_by_key(|r| r.trial_id);
    Ok(BatchOutcome {
        rows,
        failures,
        summary_path,
        manifest_path,
    })
}

/// Parse a summary file, validating the header and every row.
pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>, ExperimentError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == SUMMARY_HEADER => {}
        Some((_, header)) => {
            return Err(ExperimentError::SummaryMalformed {
                line: 1,
                detail: format!("bad header {header:?}"),
            })
        }
        None => {
            return Err(ExperimentError::SummaryMalformed {
                line: 1,
                detail: "empty file".to_string(),
            })
        }
    }
    lines
        .map(|(i, line)| SummaryRow::from_csv_line(line, i + 1))
        .collect()
}

/// Per-condition aggregates over one scenario's trials.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionStats {
    pub trials: usize,
    pub accuracy_mean: f64,
    pub accuracy_se: f64,
    pub contamination_mean: f64,
    pub contamination_se: f64,
    pub tokens_mean: f64,
    pub tokens_se: f64,
}

fn condition_stats(rows: &[&SummaryRow]) -> Result<ConditionStats, ExperimentError> {
    let pull = |f: fn(&SummaryRow) -> f64| -> Vec<f64> { rows.iter().map(|r| f(r)).collect() };
    let (accuracy_mean, accuracy_se) = mean_se(&pull(|r| r.accuracy))?;
    let (contamination_mean, contamination_se) = mean_se(&pull(|r| r.contamination))?;
    let (tokens_mean, tokens_se) = mean_se(&pull(|r| r.avg_context_tokens))?;
    Ok(ConditionStats {
        trials: rows.len(),
        accuracy_mean,
        accuracy_se,
        contamination_mean,
        contamination_se,
        tokens_mean,
        tokens_se,
    })
}

/// DACS-versus-FLAT comparison for one scenario.
#[derive(Debug, Clone)]
pub struct ReportTable {
    pub scenario_id: String,
    pub dacs: ConditionStats,
    pub flat: ConditionStats,
    /// DACS minus FLAT mean accuracy.
    pub delta_accuracy: f64,
    /// FLAT mean tokens over DACS mean tokens.
    pub efficiency_ratio: f64,
    /// Welch t-test over per-trial accuracies; None when both samples are
    /// constant at different values (zero variance, undefined t).
    pub welch: Option<WelchResult>,
    /// Aligned human-readable table.
    pub text: String,
    /// One CSV line matching [`REPORT_MACHINE_HEADER`].
    pub machine_row: String,
}

pub fn report(summary_path: &Path, scenario_id: &str) -> Result<ReportTable, ExperimentError> {
    let rows = read_summary(summary_path)?;
    let of = |c: Condition| -> Vec<&SummaryRow> {
        rows.iter()
            .filter(|r| r.scenario_id == scenario_id && r.condition == c)
            .collect()
    };
    let dacs_rows = of(Condition::Dacs);
    let flat_rows = of(Condition::Flat);
    for (name, found) in [("DACS", dacs_rows.len()), ("FLAT", flat_rows.len())] {
        if found < 2 {
            return Err(ExperimentError::ReportIncomplete {
                detail: format!(
                    "scenario {scenario_id} has {found} {name} trial(s); need at least 2 per condition"
                ),
            });
        }
    }
    let dacs = condition_stats(&dacs_rows)?;
    let flat = condition_stats(&flat_rows)?;
    let delta_accuracy = dacs.accuracy_mean - flat.accuracy_mean;
    let ratio = efficiency_ratio(flat.tokens_mean, dacs.tokens_mean)?;
    let dacs_acc: Vec<f64> = dacs_rows.iter().map(|r| r.accuracy).collect();
    let flat_acc: Vec<f64> = flat_rows.iter().map(|r| r.accuracy).collect();
    let welch = match welch_t(&dacs_acc, &flat_acc) {
        Ok(w) => Some(w),
        Err(StatsError::DegenerateVariance) => None,
        Err(e) => return Err(e.into()),
    };

    let mut text = String::new();
    text.push_str(&format!("scenario: {scenario_id}\n"));
    text.push_str(&format!(
        "{:<10} {:>6} {:>18} {:>18} {:>20}\n",
        "condition", "trials", "accuracy", "contamination", "context_tokens"
    ));
    for (name, s) in [("DACS", &dacs), ("FLAT", &flat)] {
        text.push_str(&format!(
            "{:<10} {:>6} {:>18} {:>18} {:>20}\n",
            name,
            s.trials,
            format!("{:.3}±{:.3}", s.accuracy_mean, s.accuracy_se),
            format!("{:.3}±{:.3}", s.contamination_mean, s.contamination_se),
            format!("{:.1}±{:.1}", s.tokens_mean, s.tokens_se),
        ));
    }
    text.push_str(&format!("delta accuracy (DACS - FLAT): {delta_accuracy:+.3}\n"));
    text.push_str(&format!("efficiency ratio (FLAT/DACS tokens): {ratio:.2}x\n"));
    match &welch {
        Some(w) => text.push_str(&format!(
            "welch t = {:.4}, df = {:.2}, p = {:.4e}\n",
            w.t, w.df, w.p
        )),
        None => text.push_str("welch t undefined: both accuracy samples are constant\n"),
    }

    let (wt, wdf, wp) = welch
        .as_ref()
        .map_or((f64::NAN, f64::NAN, f64::NAN), |w| (w.t, w.df, w.p));
    let machine_row = format!(
        "{scenario_id},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{delta_accuracy},{ratio},{wt},{wdf},{wp}",
        dacs.trials,
        flat.trials,
        dacs.accuracy_mean,
        dacs.accuracy_se,
        flat.accuracy_mean,
        flat.accuracy_se,
        dacs.contamination_mean,
        dacs.contamination_se,
        flat.contamination_mean,
        flat.contamination_se,
        dacs.tokens_mean,
        dacs.tokens_se,
        flat.tokens_mean,
        flat.tokens_se,
    );

    Ok(ReportTable {
        scenario_id: scenario_id.to_string(),
        dacs,
        flat,
        delta_accuracy,
        efficiency_ratio: ratio,
        welch,
        text,
        machine_row,
    })
}

/// Columnar per-scenario per-condition aggregates for external plotting:
/// means and standard errors for accuracy, contamination, and context
/// tokens.
pub fn figure_data(summary_path: &Path) -> Result<String, ExperimentError> {
    let rows = read_summary(summary_path)?;
    let mut groups: BTreeMap<(String, Condition), Vec<&SummaryRow>> = BTreeMap::new();
    for row in &rows {
        groups
            .entry((row.scenario_id.clone(), row.condition))
            .or_default()
            .push(row);
    }
    let spread = |xs: &[f64]| -> (f64, f64) {
        if xs.len() < 2 {
            (xs[0], 0.0)
        } else {
            mean_se(xs).expect("two or more samples")
        }
    };
    let mut out = String::new();
    out.push_str(&format!(
        "{:<20} {:<9} {:>6} {:>13} {:>11} {:>18} {:>16} {:>19} {:>17}\n",
        "scenario_id",
        "condition",
        "trials",
        "accuracy_mean",
        "accuracy_se",
        "contamination_mean",
        "contamination_se",
        "context_tokens_mean",
        "context_tokens_se"
    ));
    for ((scenario_id, condition), group) in &groups {
        let acc: Vec<f64> = group.iter().map(|r| r.accuracy).collect();
        let con: Vec<f64> = group.iter().map(|r| r.contamination).collect();
        let tok: Vec<f64> = group.iter().map(|r| r.avg_context_tokens).collect();
        let (am, ase) = spread(&acc);
        let (cm, cse) = spread(&con);
        let (tm, tse) = spread(&tok);
        out.push_str(&format!(
            "{scenario_id:<20} {condition:<9} {:>6} {am:>13.4} {ase:>11.4} {cm:>18.4} {cse:>16.4} {tm:>19.1} {tse:>17.2}\n",
            group.len()
        ));
    }
    Ok(out)
}
