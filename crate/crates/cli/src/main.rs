//! `cosmix`: manifest preparation, training, evaluation, embedding export,
//! ablation sweeps and self-verification.

/// `println!` that ignores a closed stdout (for example when piped into `head`).
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cosmix_core::trainer::Mode;

#[derive(Parser, Debug)]
#[command(name = "cosmix", version, about = "Contrastive mixup training for low-resource keyword spotting")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a speaker-trimmed manifest from a Speech Commands tree.
    Prepare(PrepareArgs),
    /// Train one model into a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Write encoder embeddings of one split as comma-separated text.
    ExportEmbeddings(ExportArgs),
    /// Sweep mixing ratio and alpha for mixup and cosmix.
    Ablate(AblateArgs),
    /// Run gradient checks, loss identities and front-end checks.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct PrepareArgs {
    /// Dataset root with one directory per word plus the split lists.
    #[arg(long)]
    data_root: PathBuf,
    /// Output manifest path.
    #[arg(long)]
    manifest: PathBuf,
    /// Share of each keyword's train utterances to keep, by whole speakers.
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to `<data-root>/validation_list.txt`.
    #[arg(long)]
    validation_list: Option<PathBuf>,
    /// Defaults to `<data-root>/testing_list.txt`.
    #[arg(long)]
    testing_list: Option<PathBuf>,
    /// First write a synthetic corpus into the (new or empty) data root.
    #[arg(long)]
    synthetic: bool,
    /// Synthetic clips per keyword.
    #[arg(long, default_value_t = 35, requires = "synthetic")]
    per_class: usize,
    /// Standard deviation of the synthetic background noise.
    #[arg(long, default_value_t = 0.3, requires = "synthetic")]
    noise: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Run configuration (TOML); defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "cosmix")]
    mode: Mode,
    #[arg(long)]
    run_dir: PathBuf,
    /// Override the number of epochs.
    #[arg(long)]
    epochs: Option<u32>,
    /// Override the training and initialization seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace an existing run in the run directory.
    #[arg(long, conflicts_with = "resume")]
    force: bool,
    /// Continue from the run directory's last checkpoint.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct CheckpointSource {
    /// Checkpoint file to load.
    #[arg(long, conflicts_with = "run_dir")]
    checkpoint: Option<PathBuf>,
    /// Run directory; its best checkpoint is used.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    source: CheckpointSource,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Confusion matrix output; defaults to `confusion_<split>.csv` beside the checkpoint.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[command(flatten)]
    source: CheckpointSource,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Defaults to `embeddings_<split>.csv` beside the checkpoint.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for the results table and per-cell logs.
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5,0.7,1.0")]
    ratios: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.5,10")]
    alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "mixup,cosmix")]
    modes: Vec<Mode>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt one primitive's backward rule (mutation check of the harness).
    #[arg(long, hide = true)]
    sabotage: Option<String>,
}

/// Failure classes and their exit codes.
#[derive(Debug)]
pub enum Failure {
    /// A verification suite failed.
    Check(String),
    /// Bad arguments, configuration or input data.
    Usage(String),
    /// Non-finite arithmetic during training or evaluation.
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Check(m) | Failure::Usage(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<cosmix_core::Error> for Failure {
    fn from(e: cosmix_core::Error) -> Self {
        if e.is_numeric() {
            Failure::Numeric(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = match cli.command {
        Command::Prepare(a) => commands::prepare(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::ExportEmbeddings(a) => commands::export(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Verify(a) => commands::verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
