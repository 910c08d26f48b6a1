//! `apolo`: optimize, evaluate, simulate and report on prompt-optimization
//! runs.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use apolo::backend::BackendError;
use apolo::Error;

#[derive(Debug, Parser)]
#[command(name = "apolo", version, about = "Multi-agent prompt optimization for emotion diagnosis")]
struct Cli {
    /// Log filter, e.g. `info` or `apolo=debug` (overrides RUST_LOG).
    #[arg(long, global = true)]
    log: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Plan and iteratively refine a prompt on a dataset.
    Optimize(OptimizeArgs),
    /// Score predictions against gold labels, or a prompt on a dataset.
    Evaluate(EvaluateArgs),
    /// Optimize against a keyword-based synthetic reward.
    Simulate(SimulateArgs),
    /// Print the per-iteration report of one run or a summary of several.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    /// OpenAI-compatible chat completions endpoint.
    Live,
    /// Replays a JSONL script of canned responses.
    Scripted,
    /// Scripted agents, reward from a synthetic environment.
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    CotZero,
    CotFew,
}

#[derive(Debug, Clone, Args)]
pub struct BackendArgs {
    #[arg(long, value_enum, default_value = "scripted")]
    backend: BackendKind,
    /// Endpoint base URL for the live backend.
    #[arg(long)]
    base_url: Option<String>,
    /// Model name for the live backend.
    #[arg(long)]
    model: Option<String>,
    /// JSONL response script for the scripted and synthetic backends.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Synthetic environment JSON (feature_weights, base_score).
    #[arg(long)]
    env: Option<PathBuf>,
    /// Directory of role template overrides (`<role>.txt`).
    #[arg(long)]
    templates: Option<PathBuf>,
}

/// Run parameters; flags override the config file, which overrides defaults.
#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for evaluation subsampling; part of the run id.
    #[arg(long)]
    seed: Option<u64>,
    /// Stop once the reward gain is at most this.
    #[arg(long)]
    delta: Option<f64>,
    /// Iteration cap I.
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Planner candidates K.
    #[arg(long)]
    candidates: Option<usize>,
    /// Risk penalty weight in the planner utility.
    #[arg(long)]
    gamma_risk: Option<f64>,
    /// Cost penalty weight in the planner utility.
    #[arg(long)]
    gamma_cost: Option<f64>,
    /// Sampling temperature for every agent call.
    #[arg(long)]
    temperature: Option<f64>,
    /// Evaluate on a seeded subset of this many samples.
    #[arg(long)]
    eval_subset: Option<usize>,
    /// Reward metric: micro-f1, macro-f1, emr or pma.
    #[arg(long)]
    metric: Option<String>,
    /// Concurrent Target calls during evaluation.
    #[arg(long)]
    parallelism: Option<usize>,
    /// Task goal given to the agents.
    #[arg(long)]
    goal: Option<String>,
    /// Planning strategy (risk-aware or trivial).
    #[arg(long)]
    planner: Option<String>,
    /// Ablations: no-planner, no-critic, no-socratic (comma separated or repeated).
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<String>,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    run: RunArgs,
    /// Evaluation split (JSONL).
    #[arg(long)]
    dataset: PathBuf,
    /// Held-out split scored once with the returned prompt.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Label-space file.
    #[arg(long)]
    labels: PathBuf,
    /// Initial prompt: a file path or inline text.
    #[arg(long)]
    p0: String,
    /// Evaluate a chain-of-thought baseline of p0 instead of optimizing.
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    /// Worked example for the few-shot baseline (file path or inline text).
    #[arg(long)]
    example: Option<String>,
    /// Continue an existing run from its last completed iteration.
    #[arg(long)]
    resume: Option<String>,
    /// Directory holding `runs/`.
    #[arg(long, default_value = ".")]
    root: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    run: RunArgs,
    /// Prediction file (JSONL with `id` and `label`/`labels`).
    #[arg(long, requires = "gold")]
    pred: Option<PathBuf>,
    /// Gold file in dataset format.
    #[arg(long, requires = "pred")]
    gold: Option<PathBuf>,
    /// Prompt to score with the Target (file path or inline text).
    #[arg(long, conflicts_with_all = ["pred", "gold"], requires = "dataset")]
    prompt: Option<String>,
    /// Samples to score the prompt on.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Label-space file.
    #[arg(long)]
    labels: PathBuf,
    /// Print the full report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    run: RunArgs,
    /// Initial prompt: a file path or inline text.
    #[arg(long, default_value = "Identify the emotion expressed in the text.")]
    p0: String,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory holding `runs/`.
    #[arg(long, default_value = ".")]
    root: PathBuf,
    /// Run id whose report.csv to print.
    #[arg(long, conflicts_with = "runs", required_unless_present = "runs")]
    run: Option<String>,
    /// Comma-separated run ids for a summary table.
    #[arg(long, value_delimiter = ',')]
    runs: Vec<String>,
    /// Accepted for uniformity; reports are deterministic.
    #[arg(long)]
    seed: Option<u64>,
}

pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_BACKEND: u8 = 2;
pub const EXIT_RUN: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Backend(BackendError::Config(_)) => EXIT_CONFIG,
        e if e.is_backend() => EXIT_BACKEND,
        Error::Planner(_) | Error::Step { .. } | Error::Evaluation(_) | Error::Grammar { .. } => EXIT_RUN,
        _ => EXIT_CONFIG,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let mut logger = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"));
    if let Some(filter) = &cli.log {
        logger.parse_filters(filter);
    }
    logger.init();

    let result = match cli.command {
        Command::Optimize(a) => commands::optimize(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
