//! `demian`: annotation, instructor data, rollout simulation, composite
//! evaluation, cost accounting and results aggregation from one binary.
//!
//! Exit codes: 0 on success, 1 on usage or validation errors, 2 on runtime
//! failures. Data goes to standard output or files; logs go to standard
//! error as JSON lines.

mod commands;
mod config;
mod logging;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::config::GlobalConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn invalid(e: impl std::fmt::Display) -> Self {
        CliError::Validation(e.to_string())
    }

    pub fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "demian",
    version,
    about = "Multi-aspect dense annotation toolkit",
    arg_required_else_help = true
)]
pub struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// RNG seed; equal seeds give identical outputs.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Log debug messages.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Caption every (segment, aspect) pair of a corpus.
    Annotate(AnnotateArgs),
    /// Build the reward-weighted instructor SFT dataset.
    SftGen(SftGenArgs),
    /// Simulate instruction injection during chunked rollouts.
    Simulate(SimulateArgs),
    /// Evaluate fixed vs. subgoal-switched prompting on composite tasks.
    Composite(CompositeArgs),
    /// Annotation compute and dollar cost.
    Cost(CostArgs),
    /// Oracle rows, family summaries and averages of a results matrix.
    Aggregate(AggregateArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Annotate(_) => "annotate",
            Command::SftGen(_) => "sft-gen",
            Command::Simulate(_) => "simulate",
            Command::Composite(_) => "composite",
            Command::Cost(_) => "cost",
            Command::Aggregate(_) => "aggregate",
        }
    }
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    /// Episode metadata file, or a directory holding `<dataset>.jsonl`.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// robocasa365, molmobot or egoverse.
    #[arg(long)]
    pub dataset: demian_core::ingestion::Dataset,
    /// Comma-separated aspects, or `all`.
    #[arg(long, default_value = "all")]
    pub aspects: String,
    /// Record sink (JSON lines). The checkpoint and failure ledger are
    /// written beside it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Use the deterministic mock model on a virtual clock.
    #[arg(long, conflicts_with = "endpoint")]
    pub mock: bool,
    /// JSON mock script mapping segments and aspects to outcomes.
    #[arg(long, requires = "mock")]
    pub mock_script: Option<PathBuf>,
    /// Chat-completions base URL; the key is read from DEMIAN_API_KEY.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Abort on the first malformed metadata record instead of skipping it.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct SftGenArgs {
    /// Reward table JSON, or an evaluation matrix CSV with a baseline row.
    #[arg(long)]
    pub reward_table: Option<PathBuf>,
    /// Annotation records (JSON lines).
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// SFT episodes (JSON lines).
    #[arg(long)]
    pub episodes: Option<PathBuf>,
    /// Number of examples to draw.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value = "softmax")]
    pub strategy: demian_core::instructor::TargetStrategy,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Output file; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value = "async")]
    pub mode: demian_core::rollout::RolloutMode,
    /// constant:S, gaussian:MEAN,STD or empirical:S1,S2,...
    #[arg(long, default_value = "gaussian:1.87,0.05")]
    pub latency: demian_core::rollout::LatencyModel,
    /// Actions per chunk.
    #[arg(long)]
    pub chunk: Option<u32>,
    /// Seconds per executed action.
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub steps: Option<u32>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long, default_value = "pick up the mug and place it in the cabinet")]
    pub task: String,
    /// Step at which the scripted policy succeeds.
    #[arg(long)]
    pub success_at: Option<u32>,
    /// Write every event of every episode here (JSON lines).
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompositeArgs {
    /// Suite JSON; the bundled constructed suite when omitted.
    #[arg(long)]
    pub suite: Option<PathBuf>,
    /// Prompt modes to run, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "fix,dynamic-gt")]
    pub mode: Vec<demian_core::composite::PromptMode>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u32>,
    /// Done-flag threshold for phase advancement.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Write per-episode results here (JSON lines).
    #[arg(long)]
    pub results: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[arg(long)]
    pub clips: u64,
    #[arg(long, default_value_t = 1)]
    pub aspects: u64,
    /// Active parameters of the labeling model.
    #[arg(long)]
    pub params: Option<f64>,
    /// Input tokens per call.
    #[arg(long = "in")]
    pub input_tokens: Option<f64>,
    /// Output tokens per call.
    #[arg(long = "out")]
    pub output_tokens: Option<f64>,
    /// Dollars per million input tokens.
    #[arg(long)]
    pub price_in: Option<f64>,
    /// Dollars per million output tokens.
    #[arg(long)]
    pub price_out: Option<f64>,
    /// Print a JSON object instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    /// Results matrix CSV (conditions as rows).
    #[arg(long)]
    pub matrix: PathBuf,
    /// Only use these columns, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub columns: Vec<String>,
    /// Rows whose per-column maximum forms the `oracle` row.
    #[arg(long, value_delimiter = ',')]
    pub oracle_over: Vec<String>,
    /// Family spec JSON collapsing columns into families.
    #[arg(long)]
    pub families: Option<PathBuf>,
    /// Append a macro-average column with this name.
    #[arg(long)]
    pub avg: Option<String>,
    /// Print two-decimal display values instead of full precision.
    #[arg(long)]
    pub display: bool,
    /// Output file; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => GlobalConfig::load(path)?,
        None => GlobalConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    cfg.validate().map_err(CliError::Validation)?;
    log::debug!("effective config: {cfg:?}");
    match cli.command {
        Command::Annotate(a) => commands::annotate(&cfg, a),
        Command::SftGen(a) => commands::sft_gen(&cfg, a),
        Command::Simulate(a) => commands::simulate(&cfg, a),
        Command::Composite(a) => commands::composite(&cfg, a),
        Command::Cost(a) => commands::cost(a),
        Command::Aggregate(a) => commands::aggregate(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = if cli.verbose {
        log::LevelFilter::Debug
    } else {
        log::LevelFilter::Info
    };
    logging::init(cli.command.name(), level);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
