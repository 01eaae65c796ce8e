use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use tokbias::eval::{DatasetFormat, SweepAxis};
use tokbias::knowledge::BatchSize;

pub const ENDPOINT_ENV: &str = "TOKBIAS_ENDPOINT";

#[derive(Debug, Parser)]
#[command(name = "tokbias", version, about = "Entity-biased decoding for in-context knowledge editing")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Scripted mock (needs --mock-script)
    Mock,
    /// HTTP inference server (needs --endpoint)
    Remote,
    /// Hash-driven mock with a full-size vocabulary, for timing
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Greedy,
    Sample,
}

/// Flags shared by every command. Unset flags fall back to the environment
/// (endpoint only), then the --config file, then the built-in default.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Probability filter ratio [default: 0.0005]
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Rank filter size [default: 10]
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Character n-gram size [default: 2]
    #[arg(long, global = true)]
    pub ngram: Option<usize>,
    /// New-knowledge weight [default: 25]
    #[arg(long, global = true)]
    pub lambda_new: Option<f64>,
    /// Parametric-knowledge weight [default: 1]
    #[arg(long, global = true)]
    pub lambda_para: Option<f64>,
    /// Backend [default: mock]
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendKind>,
    /// Remote endpoint URL
    #[arg(long, global = true, env = ENDPOINT_ENV)]
    pub endpoint: Option<String>,
    /// Scripted mock file (JSON)
    #[arg(long, global = true)]
    pub mock_script: Option<PathBuf>,
    /// Tokens requested per step [default: max(4k, 64)]
    #[arg(long, global = true)]
    pub top_n: Option<usize>,
    /// Token selection [default: greedy]
    #[arg(long, global = true, value_enum)]
    pub mode: Option<Mode>,
    /// Seed for sampling mode
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads [default: all cores]
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Rescale unnormalized remote responses instead of refusing them
    #[arg(long, global = true)]
    pub renormalize: bool,
    /// Remote request timeout in seconds [default: 30]
    #[arg(long, global = true)]
    pub timeout_secs: Option<u64>,
    /// Synthetic backend vocabulary size [default: 32000]
    #[arg(long, global = true)]
    pub vocab: Option<usize>,
    /// TOML file with defaults for the flags above
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Induce parametric answers and write the knowledge cache
    CacheBuild(CacheBuildArgs),
    /// Decode one prompt
    Decode(DecodeArgs),
    /// Evaluate editing accuracy on a dataset
    Eval(EvalArgs),
    /// Measure per-token latency against the unbiased control
    Bench(BenchArgs),
    /// Evaluate once per value of one hyper-parameter
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct CacheBuildArgs {
    /// Edit memory (JSON lines)
    #[arg(long)]
    pub memory: PathBuf,
    /// Output cache file; existing records for unchanged facts are reused
    #[arg(long)]
    pub cache: PathBuf,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Prompt text
    pub prompt: String,
    /// Knowledge cache supplying entity sets
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Run the unbiased control (both weights zero)
    #[arg(long)]
    pub no_bias: bool,
    /// Write step records as JSON lines ("-" for stdout)
    #[arg(long)]
    pub transcript: Option<PathBuf>,
    /// Maximum generated tokens
    #[arg(long, default_value_t = 32)]
    pub max_tokens: usize,
    /// Stop at the first newline
    #[arg(long)]
    pub stop_at_newline: bool,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Dataset file (JSON lines)
    #[arg(long)]
    pub dataset: PathBuf,
    /// Dataset layout
    #[arg(long, default_value = "mquake", value_parser = parse_format)]
    pub format: DatasetFormat,
    /// Knowledge cache; missing records are induced and written back
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Instances sharing one edit memory: a count or "full"
    #[arg(long, default_value = "1", value_parser = parse_batch)]
    pub batch: BatchSize,
    /// Facts retrieved per question
    #[arg(long, default_value_t = tokbias::eval::DEFAULT_RETRIEVE_LIMIT)]
    pub retrieve: usize,
    /// Maximum answer tokens
    #[arg(long, default_value_t = tokbias::eval::DEFAULT_ANSWER_TOKENS)]
    pub max_tokens: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Report file (JSON)
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Include wall-clock timing in the report (not reproducible)
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Decoded tokens per run (at least 100)
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    /// Timed rounds per arm
    #[arg(long, default_value_t = 11)]
    pub rounds: usize,
    /// Prompt for the timed workload
    #[arg(long, default_value = "Question: Who wrote Misery?\nAnswer:")]
    pub prompt: String,
    /// Knowledge cache supplying entity sets (default: 16 built-in words)
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Report file (JSON)
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// n, alpha, k, lambda_new or lambda_para
    #[arg(long, value_parser = parse_axis)]
    pub axis: SweepAxis,
    /// Comma-separated values
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    pub values: Vec<f64>,
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Table file; CSV when the name ends in .csv, JSON otherwise
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn parse_format(s: &str) -> Result<DatasetFormat, String> {
    s.parse()
}

fn parse_batch(s: &str) -> Result<BatchSize, String> {
    s.parse()
}

fn parse_axis(s: &str) -> Result<SweepAxis, String> {
    s.parse()
}
