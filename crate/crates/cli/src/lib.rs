//! Command-line front end: router training, evaluation, memory and latency
//! reports, attention probing and RF/RS ablations.
//!
//! Every command is a plain function over parsed arguments so tests can
//! drive it in-process; `main` only maps errors to exit codes.

pub mod commands;
pub mod config;
pub mod report;

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use moqae_core::Error;

pub use config::{RunArgs, RunConfig, Shape};
pub use report::Report;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad configuration or an unusable corpus. Exit code 2.
    Usage(String),
    /// Unreadable checkpoint or a shape mismatch against it. Exit code 3.
    Checkpoint(String),
    /// Anything else. Exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Checkpoint(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }

    /// Maps a core error raised while loading or matching a checkpoint.
    pub fn checkpoint(path: &Path, e: Error) -> Self {
        CliError::Checkpoint(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Checkpoint(m) => write!(f, "checkpoint error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Parameter(_) | Error::Input(_) | Error::Data(_) => CliError::Usage(e.to_string()),
            Error::Shape(_) | Error::Format(_) => CliError::Checkpoint(e.to_string()),
            Error::Numeric(_) | Error::Io(_) => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "moqae", version = report::VERSION, about = "Mixed-precision KV-cache quantization toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fine-tune the chunk router on the calibration split.
    Train(TrainArgs),
    /// Perplexity, average bit-width and KV bytes on the evaluation split.
    Eval(EvalArgs),
    /// KV-cache bytes against context length (CSV).
    MemoryReport(MemoryArgs),
    /// Decode-step timings with and without RF/RS (CSV).
    Latency(LatencyArgs),
    /// Attention mass received by the first k tokens, per layer (CSV).
    AttnProbe(ProbeArgs),
    /// Compare full, no-RF, no-RS and several sharing group sizes.
    Ablate(AblateArgs),
    /// Fine-tune once per lambda and tabulate the outcome (CSV).
    LambdaSweep(SweepArgs),
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Directory receiving model.bin, router.bin, train_log.csv and train_report.json.
    #[arg(long, default_value = "moqae-out")]
    pub out_dir: PathBuf,
    /// Use this model checkpoint instead of training the toy backbone.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Model checkpoint; the toy backbone is retrained from the corpus when omitted.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Router checkpoint.
    #[arg(long, conflicts_with = "force_bits")]
    pub checkpoint: Option<PathBuf>,
    /// Skip the router and store every chunk at this bit-width.
    #[arg(long)]
    pub force_bits: Option<u8>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the mixed-precision cache of the first evaluation window here.
    #[arg(long)]
    pub dump_cache: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct MemoryArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Context lengths in tokens.
    #[arg(long, default_value = "0,1024,2048,4096,8192,16384,32768,65536,131072")]
    pub lengths: String,
    /// Bit-width given to routable chunks in the strategy column.
    #[arg(long, default_value_t = 4)]
    pub force_bits: u8,
    /// Count per-group scale and zero point in the strategy column.
    #[arg(long)]
    pub with_metadata: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct LatencyArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Prompt lengths in tokens.
    #[arg(long, default_value = "64,128,256")]
    pub lengths: String,
    /// Tokens decoded after each prompt.
    #[arg(long, default_value_t = 32)]
    pub decode_steps: usize,
    /// Timed repetitions per configuration (the median is reported).
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Router checkpoint; a seeded untrained router when omitted.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Number of initial positions whose attention mass is measured.
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    /// Probe sequence length.
    #[arg(long, default_value_t = 128)]
    pub length: usize,
    /// Replace the model's attention with uniform weights.
    #[arg(long)]
    pub synthetic_uniform: bool,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Router checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value = "0.1,0.3,0.5,0.7,0.9")]
    pub lambdas: String,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Runs a parsed command and returns what it prints on stdout.
pub fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Train(a) => commands::cmd_train(&a),
        Command::Eval(a) => commands::cmd_eval(&a).map(|r| r.to_json()),
        Command::MemoryReport(a) => commands::cmd_memory_report(&a),
        Command::Latency(a) => commands::cmd_latency(&a),
        Command::AttnProbe(a) => commands::cmd_attn_probe(&a),
        Command::Ablate(a) => commands::cmd_ablate(&a).map(|r| r.to_json()),
        Command::LambdaSweep(a) => commands::cmd_lambda_sweep(&a),
    }
}
