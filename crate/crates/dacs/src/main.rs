//! Command-line entry point: run trial batches, validate scenario files,
//! and emit comparison reports or columnar figure data.
//!
//! Exit codes: 0 success, 2 unknown or invalid scenario, 3 unreadable or
//! unwritable file, 4 missing API key for the HTTP backend, 5 report
//! incomplete (fewer than two trials for a condition), 1 anything else.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use dacs::agents::{keyword_disjointness, resolve_scenario, ScenarioError};
use dacs::backend::{BackendError, BackendKind, CompletionParams};
use dacs::experiment::{
    figure_data, report, run_batch, Condition, ExperimentError, RunConfig,
    REPORT_MACHINE_HEADER,
};
use dacs::registry::Urgency;
use dacs::tokenizer::TokenCount;

#[derive(Parser)]
#[command(name = "dacs", version, about = "Scoped-context multi-agent steering harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a batch of trials; appends one row per trial to summary.csv.
    Run(RunArgs),
    /// Load a scenario and print structural diagnostics.
    Validate {
        /// Builtin scenario name or path to a scenario JSON file.
        scenario: String,
    },
    /// Print the DACS-versus-FLAT comparison table for one scenario.
    Report {
        /// Path to a summary.csv produced by `run`.
        summary: PathBuf,
        /// Scenario to compare.
        scenario_id: String,
    },
    /// Write per-scenario per-condition aggregates as columnar plot data.
    FigureData {
        /// Path to a summary.csv produced by `run`.
        summary: PathBuf,
        /// Output file; "-" writes to stdout.
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Builtin scenario name or path to a scenario JSON file.
    #[arg(long)]
    scenario: String,
    /// dacs (scoped focus contexts) or flat (everything in every prompt).
    #[arg(long, value_parser = Condition::from_str)]
    condition: Condition,
    #[arg(long, default_value_t = 10)]
    trials: u32,
    /// Base seed; each trial derives its own seed from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// mock-oracle, mock-contaminator, or http.
    #[arg(long, value_parser = BackendKind::from_str, default_value_t = BackendKind::MockOracle)]
    backend: BackendKind,
    /// Context token budget per prompt.
    #[arg(long, default_value_t = 204_800)]
    budget: usize,
    /// Directory for logs, manifest, and summary.csv.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Chat-completion URL override for the HTTP backend.
    #[arg(long)]
    endpoint: Option<String>,
    /// Model name sent to the HTTP backend.
    #[arg(long)]
    model: Option<String>,
}

fn exit_code_for(err: &ExperimentError) -> ExitCode {
    match err {
        ExperimentError::Scenario(ScenarioError::Io { .. }) => ExitCode::from(3),
        ExperimentError::Scenario(_) => ExitCode::from(2),
        ExperimentError::Io { .. } => ExitCode::from(3),
        ExperimentError::Backend(BackendError::MissingApiKey) => ExitCode::from(4),
        ExperimentError::ReportIncomplete { .. } => ExitCode::from(5),
        _ => ExitCode::FAILURE,
    }
}

fn fail(err: ExperimentError) -> ExitCode {
    eprintln!("error: {err}");
    exit_code_for(&err)
}

fn cmd_run(args: RunArgs) -> ExitCode {
    let mut params = CompletionParams::default();
    if let Some(model) = args.model {
        params.model_name = model;
    }
    params.endpoint = args.endpoint;
    let cfg = RunConfig {
        scenario: args.scenario,
        condition: args.condition,
        trials: args.trials,
        seed: args.seed,
        backend: args.backend,
        budget: TokenCount(args.budget),
        output_dir: args.out,
        params,
    };
    let outcome = match run_batch(&cfg) {
        Ok(outcome) => outcome,
        Err(err) => return fail(err),
    };
    println!("manifest: {}", outcome.manifest_path.display());
    println!("summary:  {}", outcome.summary_path.display());
    for row in &outcome.rows {
        println!("{}", row.to_csv_line());
    }
    if outcome.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        for (trial, err) in &outcome.failures {
            eprintln!("error: trial {trial} failed: {err}");
        }
        ExitCode::FAILURE
    }
}

fn cmd_validate(name: &str) -> ExitCode {
    let scenario = match resolve_scenario(name) {
        Ok(s) => s,
        Err(err) => return fail(err.into()),
    };
    println!("scenario: {}", scenario.scenario_id);
    println!("agents: {}", scenario.n_agents());
    println!("decisions: {}", scenario.total_decisions());
    println!("total steps: {}", scenario.total_steps);
    println!("user messages: {}", scenario.user_messages.len());
    for agent in &scenario.agents {
        let mut by_urgency: BTreeMap<Urgency, usize> = BTreeMap::new();
        for d in &agent.decisions {
            *by_urgency.entry(d.urgency).or_insert(0) += 1;
        }
        let breakdown: Vec<String> = by_urgency
            .iter()
            .map(|(u, n)| format!("{n} {u}"))
            .collect();
        let keywords: usize = agent.decisions.iter().map(|d| d.expected_keywords.len()).sum();
        println!(
            "agent {}: {} decisions ({}), {} expected keywords",
            agent.agent_id,
            agent.decisions.len(),
            breakdown.join(", "),
            keywords
        );
    }
    let disjointness = keyword_disjointness(&scenario);
    if disjointness.overlaps.is_empty() {
        println!("keyword disjointness: fully disjoint across agents");
    } else {
        println!("keyword overlaps:");
        for (a, b, keyword) in &disjointness.overlaps {
            println!("  {a} and {b} share {keyword:?}");
        }
    }
    ExitCode::SUCCESS
}

fn cmd_report(summary: &Path, scenario_id: &str) -> ExitCode {
    match report(summary, scenario_id) {
        Ok(table) => {
            print!("{}", table.text);
            println!();
            println!("{REPORT_MACHINE_HEADER}");
            println!("{}", table.machine_row);
            ExitCode::SUCCESS
        }
        Err(err) => fail(err),
    }
}

fn cmd_figure_data(summary: &Path, out: &Path) -> ExitCode {
    let data = match figure_data(summary) {
        Ok(data) => data,
        Err(err) => return fail(err),
    };
    if out.as_os_str() == "-" {
        print!("{data}");
        return ExitCode::SUCCESS;
    }
    match std::fs::write(out, &data) {
        Ok(()) => {
            println!("wrote {}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(ExperimentError::Io {
            path: out.display().to_string(),
            source: e,
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Validate { scenario } => cmd_validate(&scenario),
        Command::Report {
            summary,
            scenario_id,
        } => cmd_report(&summary, &scenario_id),
        Command::FigureData { summary, out } => cmd_figure_data(&summary, &out),
    }
}
