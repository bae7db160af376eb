mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use repeatnet::data::DataError;
use repeatnet::eval::EvalError;
use repeatnet::model::{Ablation, ModelError};
use repeatnet::training::{CheckpointError, TrainError};

#[derive(Parser)]
#[command(name = "repeatnet", version, about = "Session recommender with a repeat-explore mechanism")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter, index and split a session CSV into a prepared dataset.
    Prepare(PrepareArgs),
    /// Write a synthetic session CSV with a controllable repeat ratio.
    Synth(SynthArgs),
    /// Print per-split statistics of a prepared dataset.
    Stats(StatsArgs),
    /// Train a model and write checkpoints and an epoch log.
    Train(TrainArgs),
    /// Score a checkpoint (and optionally the popularity baselines).
    Eval(EvalArgs),
    /// Rank next items for one session.
    Recommend(RecommendArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitByArg {
    Chronological,
    Random,
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 5)]
    min_item_count: u64,
    #[arg(long, default_value_t = 2)]
    min_session_len: usize,
    #[arg(long)]
    max_session_len: Option<usize>,
    #[arg(long, default_value = "8:1:1")]
    split: String,
    #[arg(long, value_enum, default_value = "chronological")]
    split_by: SplitByArg,
    /// Seed for `--split-by random`.
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 50)]
    items: usize,
    #[arg(long, default_value_t = 1000)]
    sessions: usize,
    #[arg(long, default_value_t = 3)]
    min_len: usize,
    #[arg(long, default_value_t = 10)]
    max_len: usize,
    #[arg(long, default_value_t = 0.5)]
    repeat_prob: f64,
    #[arg(long, default_value_t = 1.0)]
    zipf: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Directory for checkpoints, the epoch log and the resolved config.
    #[arg(long)]
    output: PathBuf,
    /// key=value file with training settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    lr_halve_every: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    joint_mode_loss: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ablation: Option<Ablation>,
    #[arg(long)]
    emb_size: Option<usize>,
    #[arg(long)]
    hidden_size: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Breakdown {
    Repeat,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Validation,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitName,
    #[arg(long, value_delimiter = ',', default_value = "10,20")]
    k: Vec<usize>,
    #[arg(long, value_enum)]
    breakdown: Option<Breakdown>,
    /// Run the checkpoint as this variant instead of the one it was trained as.
    #[arg(long)]
    ablation: Option<Ablation>,
    /// Also report POP and S-POP on the same examples.
    #[arg(long)]
    baselines: bool,
    /// Write one JSON record per (model, segment, k) to this file.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct RecommendArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated item ids, oldest first.
    #[arg(long)]
    session: String,
    #[arg(long, default_value_t = 10)]
    top: usize,
}

/// Failure classes mapped onto the documented exit codes.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(m) => Failure::Usage(m),
            other => Failure::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => Failure::Usage(e.to_string()),
            TrainError::NonFiniteGrad { .. } | TrainError::NonFiniteLoss { .. } => Failure::Numeric(e.to_string()),
            TrainError::Model(m) => m.into(),
            other => Failure::Data(other.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::ZeroK => Failure::Usage(e.to_string()),
            other => Failure::Data(other.to_string()),
        }
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Failure::Data(format!("--checkpoint: {e}"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(a) => commands::prepare(a),
        Command::Synth(a) => commands::synth(a),
        Command::Stats(a) => commands::stats(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Recommend(a) => commands::recommend(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
