//! Context assembly: focus, registry-only, and flat prompts.
//!
//! A steering prompt for agent `a` is that agent's full working record plus
//! one capped registry line per other agent. The flat baseline instead
//! concatenates every agent's full record. Both end with the same one-line
//! steering directive, so the two conditions differ only in composition.
//!
//! Every builder returns a [`BuiltContext`] whose `full_text` is the entire
//! prompt: token accounting is exact because sections are joined by
//! newlines, which cost zero tokens under the default rule.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::registry::{render_entry, Registry, RegistryEntry, Urgency, ENTRY_TOKEN_BUDGET};
use crate::tokenizer::{count_tokens, truncate_to, TokenCount};

/// Everything the orchestrator holds about one agent while steering it.
/// Unlike registry entries, fields are never truncated: this record is the
/// detail that the registry line compresses away.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FocusRecord {
    pub agent_id: String,
    pub task_description: String,
    /// Completed steering exchanges, oldest first.
    pub steering_history: Vec<(String, String)>,
    pub partial_output_summary: String,
}

impl FocusRecord {
    pub fn new(agent_id: impl Into<String>, task_description: impl Into<String>) -> Self {
        FocusRecord {
            agent_id: agent_id.into(),
            task_description: task_description.into(),
            steering_history: Vec::new(),
            partial_output_summary: String::new(),
        }
    }

    /// Copy of this record with `question` appended as a not-yet-answered
    /// exchange. Used to put the pending question inside the prompt that
    /// will answer it.
    pub fn with_pending_question(&self, question: &str) -> FocusRecord {
        let mut copy = self.clone();
        copy.steering_history
            .push((question.to_string(), String::new()));
        copy
    }
}

/// What a span of the prompt is for. One label per section, in text order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SectionLabel {
    /// The steered agent's full record (focus condition).
    Focus(String),
    /// One other agent's capped registry line.
    RegistryEntry(String),
    /// One agent's full record (flat condition).
    Flat(String),
    /// Directive or user text.
    User,
}

/// A finished prompt with its exact token accounting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuiltContext {
    pub full_text: String,
    pub token_count: TokenCount,
    pub sections: Vec<(SectionLabel, TokenCount)>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ContextError {
    #[error("focus content needs {needed} tokens but the budget is {budget}")]
    FocusContextOverflow { needed: TokenCount, budget: TokenCount },
    #[error("unknown agent: {agent_id}")]
    UnknownAgent { agent_id: String },
}

/// Budget settings for one build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuilderConfig {
    /// Hard ceiling for the whole prompt.
    pub budget: TokenCount,
    /// Ceiling for each rendered registry line inside a prompt.
    pub registry_entry_cap: TokenCount,
}

impl BuilderConfig {
    pub fn new(budget: TokenCount) -> Self {
        BuilderConfig {
            budget,
            registry_entry_cap: ENTRY_TOKEN_BUDGET,
        }
    }
}

/// The line that names the agent being steered. Rendered at the end of the
/// focus section and, identically, as the flat context's trailing section:
/// exactly one occurrence per steering prompt in either condition.
pub fn steering_directive(agent_id: &str) -> String {
    format!("STEER TARGET: {agent_id}")
}

/// An agent's record as prompt text, without the directive.
pub fn render_focus_body(record: &FocusRecord) -> String {
    let mut out = String::new();
    out.push_str(&format!("AGENT: {}\n", record.agent_id));
    out.push_str(&format!("TASK: {}\n", record.task_description));
    out.push_str("HISTORY:\n");
    for (question, answer) in &record.steering_history {
        out.push_str(&format!("Q: {question}\n"));
        out.push_str(&format!("A: {answer}\n"));
    }
    out.push_str(&format!(
        "PARTIAL OUTPUT: {}",
        record.partial_output_summary
    ));
    out
}

/// An agent's record as the focus section: body plus directive.
pub fn render_focus_section(record: &FocusRecord) -> String {
    format!(
        "{}\n{}",
        render_focus_body(record),
        steering_directive(&record.agent_id)
    )
}

fn assemble(sections: Vec<(SectionLabel, String)>) -> BuiltContext {
    let full_text = sections
        .iter()
        .map(|(_, text)| text.as_str())
        .collect::<Vec<_>>()
        .join("\n");
    let labelled: Vec<(SectionLabel, TokenCount)> = sections
        .iter()
        .map(|(label, text)| (label.clone(), count_tokens(text)))
        .collect();
    let token_count = count_tokens(&full_text);
    debug_assert_eq!(
        token_count,
        labelled.iter().map(|(_, t)| *t).sum::<TokenCount>(),
        "newline joins must be token-free"
    );
    BuiltContext {
        full_text,
        token_count,
        sections: labelled,
    }
}

/// Capped registry line for use inside a prompt.
fn capped_entry_text(entry: &RegistryEntry, cap: TokenCount) -> String {
    truncate_to(&render_entry(entry), cap).to_string()
}

struct EntrySection {
    agent_id: String,
    urgency: Urgency,
    text: String,
    tokens: TokenCount,
    dropped: bool,
}

impl EntrySection {
    fn from_entry(entry: &RegistryEntry, cap: TokenCount) -> Self {
        let text = capped_entry_text(entry, cap);
        let tokens = count_tokens(&text);
        EntrySection {
            agent_id: entry.agent_id().to_string(),
            urgency: entry.urgency(),
            text,
            tokens,
            dropped: false,
        }
    }
}

/// Two-stage degradation shared by the focus and registry builders: walk
/// victims in ascending urgency (ties broken by agent id), first dropping
/// summaries, then dropping whole lines, until the total fits `allowance`.
fn degrade_entries(sections: &mut [EntrySection], registry: &Registry, allowance: TokenCount, cap: TokenCount) {
    let total = |sections: &[EntrySection]| -> TokenCount {
        sections.iter().filter(|s| !s.dropped).map(|s| s.tokens).sum()
    };
    if total(sections) <= allowance {
        return;
    }
    let mut victim_order: Vec<usize> = (0..sections.len()).collect();
    victim_order.sort_by(|&a, &b| {
        (sections[a].urgency, &sections[a].agent_id).cmp(&(sections[b].urgency, &sections[b].agent_id))
    });
    for &i in &victim_order {
        let entry = registry
            .get(&sections[i].agent_id)
            .expect("section built from this registry");
        let text = capped_entry_text(&entry.without_summary(), cap);
        sections[i].tokens = count_tokens(&text);
        sections[i].text = text;
        if total(sections) <= allowance {
            return;
        }
    }
    for &i in &victim_order {
        sections[i].dropped = true;
        if total(sections) <= allowance {
            return;
        }
    }
}

/// Prompt for steering `target`: its full record first (never truncated),
/// then one capped registry line per other agent in lexicographic order.
/// When the budget is tight the registry lines degrade; when even the bare
/// focus section does not fit, the build fails rather than truncate it.
pub fn build_focus_context(
    target: &str,
    focus: &FocusRecord,
    registry: &Registry,
    cfg: &BuilderConfig,
) -> Result<BuiltContext, ContextError> {
    if !registry.contains(target) {
        return Err(ContextError::UnknownAgent {
            agent_id: target.to_string(),
        });
    }
    assert_eq!(focus.agent_id, target, "focus record must belong to the target");

    let focus_text = render_focus_section(focus);
    let focus_tokens = count_tokens(&focus_text);
    if focus_tokens > cfg.budget {
        return Err(ContextError::FocusContextOverflow {
            needed: focus_tokens,
            budget: cfg.budget,
        });
    }

    let mut entries: Vec<EntrySection> = registry
        .iter()
        .filter(|e| e.agent_id() != target)
        .map(|e| EntrySection::from_entry(e, cfg.registry_entry_cap))
        .collect();
    let allowance = cfg.budget.saturating_sub(focus_tokens);
    degrade_entries(&mut entries, registry, allowance, cfg.registry_entry_cap);

    let mut sections = vec![(SectionLabel::Focus(target.to_string()), focus_text)];
    sections.extend(
        entries
            .into_iter()
            .filter(|s| !s.dropped)
            .map(|s| (SectionLabel::RegistryEntry(s.agent_id), s.text)),
    );
    Ok(assemble(sections))
}

/// Monitoring prompt: every agent's capped registry line, nothing else.
/// Never fails; a hopeless budget degrades down to an empty context.
pub fn build_registry_context(registry: &Registry, cfg: &BuilderConfig) -> BuiltContext {
    let mut entries: Vec<EntrySection> = registry
        .iter()
        .map(|e| EntrySection::from_entry(e, cfg.registry_entry_cap))
        .collect();
    degrade_entries(&mut entries, registry, cfg.budget, cfg.registry_entry_cap);
    let sections: Vec<(SectionLabel, String)> = entries
        .into_iter()
        .filter(|s| !s.dropped)
        .map(|s| (SectionLabel::RegistryEntry(s.agent_id), s.text))
        .collect();
    assemble(sections)
}

/// Baseline prompt: every agent's full record in lexicographic order, then
/// the same directive line the focus condition uses. Over budget, the
/// records of *other* agents shrink first (oldest history pairs go first,
/// then token truncation); the target's record and the directive are never
/// touched: if they alone exceed the budget the build fails.
pub fn build_flat_context(
    target: &str,
    all_focus: &BTreeMap<String, FocusRecord>,
    registry: &Registry,
    cfg: &BuilderConfig,
) -> Result<BuiltContext, ContextError> {
    if !all_focus.contains_key(target) || !registry.contains(target) {
        return Err(ContextError::UnknownAgent {
            agent_id: target.to_string(),
        });
    }

    let directive = steering_directive(target);
    let directive_tokens = count_tokens(&directive);
    let target_tokens = count_tokens(&render_focus_body(&all_focus[target]));
    if target_tokens + directive_tokens > cfg.budget {
        return Err(ContextError::FocusContextOverflow {
            needed: target_tokens + directive_tokens,
            budget: cfg.budget,
        });
    }

    // (agent_id, degradable record, rendered body, tokens)
    struct FlatSection {
        agent_id: String,
        record: FocusRecord,
        text: String,
        tokens: TokenCount,
    }
    let mut bodies: Vec<FlatSection> = all_focus
        .values()
        .map(|rec| {
            let text = render_focus_body(rec);
            let tokens = count_tokens(&text);
            FlatSection {
                agent_id: rec.agent_id.clone(),
                record: rec.clone(),
                text,
                tokens,
            }
        })
        .collect();

    let total = |bodies: &[FlatSection]| -> TokenCount {
        bodies.iter().map(|b| b.tokens).sum::<TokenCount>() + directive_tokens
    };

    if total(&bodies) > cfg.budget {
        for i in 0..bodies.len() {
            if bodies[i].agent_id == target {
                continue;
            }
            // Oldest history pairs go first.
            while total(&bodies) > cfg.budget && !bodies[i].record.steering_history.is_empty() {
                bodies[i].record.steering_history.remove(0);
                bodies[i].text = render_focus_body(&bodies[i].record);
                bodies[i].tokens = count_tokens(&bodies[i].text);
            }
            if total(&bodies) > cfg.budget {
                let others: TokenCount = total(&bodies).saturating_sub(bodies[i].tokens);
                let allowed = cfg.budget.saturating_sub(others);
                bodies[i].text = truncate_to(&bodies[i].text, allowed).to_string();
                bodies[i].tokens = count_tokens(&bodies[i].text);
            }
            if total(&bodies) <= cfg.budget {
                break;
            }
        }
    }

    let mut sections: Vec<(SectionLabel, String)> = bodies
        .into_iter()
        .filter(|b| !b.text.is_empty())
        .map(|b| (SectionLabel::Flat(b.agent_id), b.text))
        .collect();
    sections.push((SectionLabel::User, directive));
    Ok(assemble(sections))
}

/// Monitoring prompt plus the user's message as a trailing section. The
/// registry part yields room to the user line; the user line itself is
/// truncated only if it alone exceeds the whole budget.
pub fn build_user_context(registry: &Registry, message: &str, cfg: &BuilderConfig) -> BuiltContext {
    let user_line = truncate_to(&format!("USER MESSAGE: {message}"), cfg.budget).to_string();
    let user_tokens = count_tokens(&user_line);
    let reg_cfg = BuilderConfig {
        budget: cfg.budget.saturating_sub(user_tokens),
        registry_entry_cap: cfg.registry_entry_cap,
    };
    let reg = build_registry_context(registry, &reg_cfg);
    let mut sections = reg.sections;
    let full_text = match (reg.full_text.is_empty(), user_line.is_empty()) {
        (true, _) => user_line.clone(),
        (false, true) => reg.full_text,
        (false, false) => format!("{}\n{}", reg.full_text, user_line),
    };
    if !user_line.is_empty() {
        sections.push((SectionLabel::User, user_tokens));
    }
    let token_count = count_tokens(&full_text);
    debug_assert_eq!(
        token_count,
        sections.iter().map(|(_, t)| *t).sum::<TokenCount>()
    );
    BuiltContext {
        full_text,
        token_count,
        sections,
    }
}

/// Predicted focus-prompt size: the target's record plus one capped line
/// per other agent.
pub fn predicted_focus_tokens(focus_tokens: TokenCount, entry_tokens: TokenCount, n_agents: usize) -> TokenCount {
    TokenCount(focus_tokens.0 + n_agents.saturating_sub(1) * entry_tokens.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocols::Heartbeat;
    use crate::registry::AgentStatus;
    use proptest::prelude::*;

    fn hb(agent_id: &str, task: &str, summary: &str, urgency: Urgency) -> Heartbeat {
        Heartbeat {
            agent_id: agent_id.to_string(),
            status: AgentStatus::Running,
            task: task.to_string(),
            last_output_summary: summary.to_string(),
            urgency,
            tick: 1,
        }
    }

    fn registry_of(entries: &[(&str, &str, &str, Urgency)]) -> Registry {
        let mut reg = Registry::new();
        for (id, task, summary, urgency) in entries {
            reg.upsert(&hb(id, task, summary, *urgency));
        }
        reg
    }

    /// Pad the record's task until its focus *section* (body + directive)
    /// renders to exactly `target` tokens.
    fn record_with_section_tokens(id: &str, target: usize) -> FocusRecord {
        let mut rec = FocusRecord::new(id, "t");
        rec.partial_output_summary = "p".to_string();
        let have = count_tokens(&render_focus_section(&rec)).0;
        assert!(target >= have, "target {target} below minimal render {have}");
        let mut task = rec.task_description.clone();
        for i in 0..(target - have) {
            task.push_str(&format!(" w{i}"));
        }
        rec.task_description = task;
        assert_eq!(count_tokens(&render_focus_section(&rec)).0, target);
        rec
    }

    /// Pad an agent's heartbeat task until its rendered registry line is
    /// exactly `target` tokens.
    fn heartbeat_with_entry_tokens(id: &str, target: usize, urgency: Urgency) -> Heartbeat {
        let mut task = "t".to_string();
        loop {
            let hb = hb(id, &task, "s", urgency);
            let mut reg = Registry::new();
            reg.upsert(&hb);
            let have = count_tokens(&render_entry(reg.get(id).unwrap())).0;
            if have == target {
                return hb;
            }
            assert!(have < target, "overshot entry size: {have} > {target}");
            task.push_str(&format!(" w{}", have));
        }
    }

    #[test]
    fn focus_composes_record_plus_capped_lines() {
        let mut reg = Registry::new();
        reg.upsert(&hb("a1", "t", "s", Urgency::Medium));
        for id in ["b1", "b2", "b3"] {
            reg.upsert(&heartbeat_with_entry_tokens(id, 25, Urgency::Low));
        }
        let rec = record_with_section_tokens("a1", 400);
        let cfg = BuilderConfig::new(TokenCount(10_000));
        let ctx = build_focus_context("a1", &rec, &reg, &cfg).unwrap();
        assert_eq!(ctx.token_count, TokenCount(475));
        assert_eq!(ctx.sections.len(), 4);
        assert!(matches!(&ctx.sections[0].0, SectionLabel::Focus(id) if id == "a1"));
        assert_eq!(ctx.sections[0].1, TokenCount(400));
        for (label, tokens) in &ctx.sections[1..] {
            assert!(matches!(label, SectionLabel::RegistryEntry(_)));
            assert_eq!(*tokens, TokenCount(25));
        }
    }

    #[test]
    fn focus_fits_exactly_at_budget_equal_to_record() {
        let reg = registry_of(&[("a1", "t", "s", Urgency::Low), ("b1", "t", "s", Urgency::Low)]);
        let rec = record_with_section_tokens("a1", 120);
        let cfg = BuilderConfig::new(TokenCount(120));
        let ctx = build_focus_context("a1", &rec, &reg, &cfg).unwrap();
        // Only the focus section survives; the other agent's line is shed.
        assert_eq!(ctx.token_count, TokenCount(120));
        assert_eq!(ctx.sections.len(), 1);
    }

    #[test]
    fn focus_overflow_is_an_error_not_a_truncation() {
        let reg = registry_of(&[("a1", "t", "s", Urgency::Low)]);
        let rec = record_with_section_tokens("a1", 121);
        let cfg = BuilderConfig::new(TokenCount(120));
        let err = build_focus_context("a1", &rec, &reg, &cfg).unwrap_err();
        assert_eq!(
            err,
            ContextError::FocusContextOverflow {
                needed: TokenCount(121),
                budget: TokenCount(120)
            }
        );
    }

    #[test]
    fn focus_rejects_unknown_target() {
        let reg = registry_of(&[("a1", "t", "s", Urgency::Low)]);
        let rec = FocusRecord::new("zz", "t");
        let cfg = BuilderConfig::new(TokenCount(100));
        assert_eq!(
            build_focus_context("zz", &rec, &reg, &cfg).unwrap_err(),
            ContextError::UnknownAgent {
                agent_id: "zz".to_string()
            }
        );
    }

    #[test]
    fn degradation_drops_summaries_ascending_urgency_first() {
        // Three entries with distinct urgencies and fat summaries.
        let summary = "s1 s2 s3 s4 s5 s6 s7 s8";
        let reg = registry_of(&[
            ("a1", "t", "s", Urgency::Medium),
            ("low", "task words", summary, Urgency::Low),
            ("med", "task words", summary, Urgency::Medium),
            ("high", "task words", summary, Urgency::High),
        ]);
        let rec = record_with_section_tokens("a1", 20);
        let full = build_focus_context("a1", &rec, &reg, &BuilderConfig::new(TokenCount(10_000))).unwrap();
        let summary_tokens = count_tokens(summary).0;

        // Budget that forces exactly one summary drop: the LOW entry's.
        let cfg = BuilderConfig::new(TokenCount(full.token_count.0 - summary_tokens));
        let ctx = build_focus_context("a1", &rec, &reg, &cfg).unwrap();
        let line_of = |id: &str| {
            ctx.full_text
                .lines()
                .find(|l| l.starts_with(&format!("{id}:")))
                .map(str::to_string)
        };
        assert!(!line_of("low").unwrap().contains("s1"));
        assert!(line_of("med").unwrap().contains("s1"));
        assert!(line_of("high").unwrap().contains("s1"));

        // Tighter: all summaries must go before any whole line goes.
        let cfg = BuilderConfig::new(TokenCount(full.token_count.0 - 3 * summary_tokens));
        let ctx = build_focus_context("a1", &rec, &reg, &cfg).unwrap();
        for id in ["low", "med", "high"] {
            let line = ctx
                .full_text
                .lines()
                .find(|l| l.starts_with(&format!("{id}:")))
                .unwrap_or_else(|| panic!("line for {id} missing"));
            assert!(!line.contains("s1"));
        }

        // Tighter still: whole entries drop, lowest urgency first.
        let cfg = BuilderConfig::new(TokenCount(full.token_count.0 - 3 * summary_tokens - 1));
        let ctx = build_focus_context("a1", &rec, &reg, &cfg).unwrap();
        assert!(!ctx.full_text.contains("low:"));
        assert!(ctx.full_text.contains("high:"));
    }

    #[test]
    fn registry_context_respects_linear_cap() {
        let mut reg = Registry::new();
        for i in 0..10 {
            reg.upsert(&hb(&format!("a{i}"), "task", "summary", Urgency::Low));
        }
        let ctx = build_registry_context(&reg, &BuilderConfig::new(TokenCount(100_000)));
        assert!(ctx.token_count <= TokenCount(2000));
        assert_eq!(ctx.sections.len(), 10);
    }

    #[test]
    fn registry_context_of_empty_registry_is_empty() {
        let ctx = build_registry_context(&Registry::new(), &BuilderConfig::new(TokenCount(100)));
        assert_eq!(ctx.full_text, "");
        assert_eq!(ctx.token_count, TokenCount(0));
        assert!(ctx.sections.is_empty());
    }

    #[test]
    fn registry_context_degrades_to_empty_under_hopeless_budget() {
        let reg = registry_of(&[
            ("a1", "task", "sum", Urgency::Low),
            ("a2", "task", "sum", Urgency::High),
        ]);
        let ctx = build_registry_context(&reg, &BuilderConfig::new(TokenCount(1)));
        assert!(ctx.token_count <= TokenCount(1));
    }

    #[test]
    fn flat_concatenates_all_records_and_one_directive() {
        let mut all = BTreeMap::new();
        let mut reg = Registry::new();
        for id in ["a1", "a2", "a3"] {
            // Body size 397: section size minus the directive line.
            let rec = record_with_section_tokens(id, 397 + count_tokens(&steering_directive(id)).0);
            all.insert(id.to_string(), rec);
            reg.upsert(&hb(id, "t", "s", Urgency::Low));
        }
        let cfg = BuilderConfig::new(TokenCount(10_000));
        let ctx = build_flat_context("a2", &all, &reg, &cfg).unwrap();
        let dir_tokens = count_tokens(&steering_directive("a2")).0;
        assert_eq!(ctx.token_count, TokenCount(3 * 397 + dir_tokens));
        assert_eq!(ctx.sections.len(), 4);
        assert!(ctx.full_text.ends_with(&steering_directive("a2")));
        assert_eq!(ctx.full_text.matches("STEER TARGET:").count(), 1);
    }

    #[test]
    fn flat_for_one_agent_equals_focus_text() {
        let reg = registry_of(&[("solo", "task here", "sum", Urgency::Medium)]);
        let mut rec = FocusRecord::new("solo", "task here");
        rec.steering_history.push(("q1".into(), "a1".into()));
        rec.partial_output_summary = "partial".into();
        let mut all = BTreeMap::new();
        all.insert("solo".to_string(), rec.clone());
        let cfg = BuilderConfig::new(TokenCount(10_000));
        let flat = build_flat_context("solo", &all, &reg, &cfg).unwrap();
        let focus = build_focus_context("solo", &rec, &reg, &cfg).unwrap();
        assert_eq!(flat.full_text, focus.full_text);
        assert_eq!(flat.token_count, focus.token_count);
    }

    #[test]
    fn flat_degrades_other_records_oldest_history_first() {
        let mut all = BTreeMap::new();
        let mut reg = Registry::new();
        for id in ["a1", "a2"] {
            let mut rec = FocusRecord::new(id, "task");
            rec.steering_history = vec![
                ("oldq oldq oldq".into(), "olda olda olda".into()),
                ("newq".into(), "newa".into()),
            ];
            rec.partial_output_summary = "p".into();
            all.insert(id.to_string(), rec);
            reg.upsert(&hb(id, "task", "s", Urgency::Low));
        }
        let full = build_flat_context("a2", &all, &reg, &BuilderConfig::new(TokenCount(10_000))).unwrap();
        // Drop enough that a1 must lose its oldest pair but a2 stays whole.
        let cfg = BuilderConfig::new(TokenCount(full.token_count.0 - 4));
        let ctx = build_flat_context("a2", &all, &reg, &cfg).unwrap();
        let a1_span = &ctx.full_text[..ctx.full_text.find("AGENT: a2").unwrap()];
        let a2_span = &ctx.full_text[ctx.full_text.find("AGENT: a2").unwrap()..];
        assert!(!a1_span.contains("oldq"));
        assert!(a1_span.contains("newq"));
        assert!(a2_span.contains("oldq"));
    }

    #[test]
    fn flat_fails_when_target_and_directive_alone_overflow() {
        let reg = registry_of(&[("a1", "t", "s", Urgency::Low)]);
        let mut all = BTreeMap::new();
        all.insert("a1".to_string(), record_with_section_tokens("a1", 50));
        let err = build_flat_context("a1", &all, &reg, &BuilderConfig::new(TokenCount(30))).unwrap_err();
        assert!(matches!(err, ContextError::FocusContextOverflow { .. }));
    }

    #[test]
    fn flat_rejects_unknown_target() {
        let reg = registry_of(&[("a1", "t", "s", Urgency::Low)]);
        let mut all = BTreeMap::new();
        all.insert("a1".to_string(), FocusRecord::new("a1", "t"));
        let err = build_flat_context("zz", &all, &reg, &BuilderConfig::new(TokenCount(100))).unwrap_err();
        assert_eq!(err, ContextError::UnknownAgent { agent_id: "zz".into() });
    }

    #[test]
    fn user_context_appends_user_section() {
        let reg = registry_of(&[("a1", "t", "s", Urgency::Low)]);
        let ctx = build_user_context(&reg, "how is progress?", &BuilderConfig::new(TokenCount(1_000)));
        assert!(ctx.full_text.ends_with("USER MESSAGE: how is progress?"));
        assert!(matches!(ctx.sections.last().unwrap().0, SectionLabel::User));
        assert!(ctx.token_count <= TokenCount(1_000));
    }

    #[test]
    fn predicted_tokens_match_the_linear_form() {
        assert_eq!(
            predicted_focus_tokens(TokenCount(500), TokenCount(25), 10),
            TokenCount(725)
        );
        assert_eq!(
            predicted_focus_tokens(TokenCount(500), TokenCount(25), 1),
            TokenCount(500)
        );
    }

    #[test]
    fn builds_are_byte_deterministic() {
        let reg = registry_of(&[
            ("a1", "alpha work", "alpha sum", Urgency::Medium),
            ("b1", "beta work", "beta sum", Urgency::High),
        ]);
        let mut rec = FocusRecord::new("a1", "alpha work");
        rec.steering_history.push(("q".into(), "a".into()));
        let cfg = BuilderConfig::new(TokenCount(500));
        let c1 = build_focus_context("a1", &rec, &reg, &cfg).unwrap();
        let c2 = build_focus_context("a1", &rec, &reg, &cfg).unwrap();
        assert_eq!(c1, c2);
    }

    prop_compose! {
        fn arb_record(id: String)(
            task in proptest::collection::vec("[a-z]{2,6}", 1..8),
            hist in proptest::collection::vec(
                (proptest::collection::vec("[a-z]{2,6}", 1..5),
                 proptest::collection::vec("[a-z]{2,6}", 1..5)), 0..4),
            summary in proptest::collection::vec("[a-z]{2,6}", 0..6),
        ) -> FocusRecord {
            FocusRecord {
                agent_id: id.clone(),
                task_description: task.join(" "),
                steering_history: hist
                    .into_iter()
                    .map(|(q, a)| (q.join(" "), a.join(" ")))
                    .collect(),
                partial_output_summary: summary.join(" "),
            }
        }
    }

    proptest! {
        #[test]
        fn section_token_counts_sum_to_total(
            recs in proptest::collection::vec(arb_record("x".into()), 1..5),
            budget in 50usize..4000,
        ) {
            let mut all = BTreeMap::new();
            let mut reg = Registry::new();
            for (i, mut rec) in recs.into_iter().enumerate() {
                let id = format!("a{i}");
                rec.agent_id = id.clone();
                reg.upsert(&hb(&id, &rec.task_description, &rec.partial_output_summary, Urgency::Low));
                all.insert(id, rec);
            }
            let cfg = BuilderConfig::new(TokenCount(budget));
            let target = "a0";
            if let Ok(ctx) = build_focus_context(target, &all[target], &reg, &cfg) {
                let sum: TokenCount = ctx.sections.iter().map(|(_, t)| *t).sum();
                prop_assert_eq!(sum, ctx.token_count);
                prop_assert!(ctx.token_count <= cfg.budget);
            }
            if let Ok(ctx) = build_flat_context(target, &all, &reg, &cfg) {
                let sum: TokenCount = ctx.sections.iter().map(|(_, t)| *t).sum();
                prop_assert_eq!(sum, ctx.token_count);
                prop_assert!(ctx.token_count <= cfg.budget);
            }
            let ctx = build_registry_context(&reg, &cfg);
            let sum: TokenCount = ctx.sections.iter().map(|(_, t)| *t).sum();
            prop_assert_eq!(sum, ctx.token_count);
            prop_assert!(ctx.token_count <= cfg.budget);
        }

        #[test]
        fn flat_never_costs_less_than_focus_for_same_state(
            recs in proptest::collection::vec(arb_record("x".into()), 2..6),
        ) {
            // Registry derived from the same records, as the harness does.
            let mut all = BTreeMap::new();
            let mut reg = Registry::new();
            for (i, mut rec) in recs.into_iter().enumerate() {
                let id = format!("a{i}");
                rec.agent_id = id.clone();
                reg.upsert(&hb(&id, &rec.task_description, &rec.partial_output_summary, Urgency::Low));
                all.insert(id, rec);
            }
            let cfg = BuilderConfig::new(TokenCount(1_000_000));
            for target in all.keys() {
                let focus = build_focus_context(target, &all[target], &reg, &cfg).unwrap();
                let flat = build_flat_context(target, &all, &reg, &cfg).unwrap();
                prop_assert!(flat.token_count >= focus.token_count);
            }
        }
    }
}
