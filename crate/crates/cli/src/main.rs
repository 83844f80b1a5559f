//! `noisenet` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.

mod commands;

use std::io::IsTerminal;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "noisenet", version, about = "Aircraft noise event classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate an event dataset and print a summary
    Ingest(IngestArgs),
    /// Generate a labeled synthetic dataset
    Synth(SynthArgs),
    /// Train one network and write its checkpoint
    Train(TrainArgs),
    /// Stratified k-fold cross-validation with several seeds per fold
    Cv(CvArgs),
    /// Classify events with a trained checkpoint
    Classify(ClassifyArgs),
    /// Compare analytic gradients with central finite differences
    Gradcheck(GradcheckArgs),
    /// Bin the accuracies of a cross-validation report
    Histogram(HistogramArgs),
    /// Detect noise events in a 1 Hz level stream
    Detect(DetectArgs),
    /// Run the HTTP service
    Serve(ServeArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct IngestArgs {
    /// Event JSONL file
    pub path: PathBuf,
    /// Rewrite the validated events here in canonical form [default: none]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 450)]
    pub n_per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// 0 keeps the classes far apart, 1 makes their parameter ranges overlap
    #[arg(long, default_value_t = 0.25)]
    pub difficulty: f64,
    /// Generate this many shifted community-variant events instead of a
    /// balanced set [default: none]
    #[arg(long)]
    pub variant: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Training overrides shared by `train` and `cv`. Flags win over the file.
#[derive(Debug, Args, Serialize)]
pub struct TrainOverrides {
    /// TrainConfig JSON; missing fields take defaults [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// [default: from config, 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// [default: from config, 300]
    #[arg(long)]
    pub steps: Option<usize>,
    /// [default: from config, 2000]
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Labeled event JSONL file
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path
    #[arg(long)]
    pub out: PathBuf,
    /// Labeled events evaluated during training [default: none]
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Version string stored in the checkpoint
    #[arg(long, default_value = "v1")]
    pub model_version: String,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Debug, Args, Serialize)]
pub struct CvArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Trainings per fold, each with its own seed
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    #[arg(long, default_value = "cv_report.json")]
    pub report: PathBuf,
    /// Histogram CSV [default: the report path with a .csv extension]
    #[arg(long)]
    pub histogram: Option<PathBuf>,
    #[arg(long, default_value_t = 0.01)]
    pub bin_width: f64,
    /// Parallel trainings [default: number of processors]
    #[arg(long)]
    pub workers: Option<usize>,
    #[command(flatten)]
    pub train: TrainOverrides,
}

#[derive(Debug, Args, Serialize)]
pub struct ClassifyArgs {
    /// Checkpoint path
    #[arg(long)]
    pub model: PathBuf,
    /// Event JSON or JSONL file
    #[arg(long)]
    pub event: PathBuf,
    /// Entropy in nats above which an event is queued for labeling
    #[arg(long, default_value_t = 0.45)]
    pub threshold: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    /// NetworkConfig JSON [default: built-in network]
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Coordinates checked per parameter tensor
    #[arg(long, default_value_t = 200)]
    pub max_coords: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct HistogramArgs {
    /// CvReport JSON written by `cv`
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    pub bin_width: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct DetectArgs {
    /// CSV of `timestamp,level_dba` rows at 1 s spacing; a header row is allowed
    #[arg(long)]
    pub stream: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    /// ServiceConfig JSON; environment variables override it [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// How a command failed, which decides the exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<noisenet_core::Error> for Failure {
    fn from(e: noisenet_core::Error) -> Self {
        if e.is_data_error() {
            Failure::Data(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<noisenet_service::ServiceError> for Failure {
    fn from(e: noisenet_service::ServiceError) -> Self {
        use noisenet_service::ServiceError as S;
        match e {
            S::Core(e) => e.into(),
            S::Config(m) => Failure::Data(m),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .init();
    let result = match cli.command {
        Command::Ingest(a) => commands::ingest(a),
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Cv(a) => commands::cv(a),
        Command::Classify(a) => commands::classify(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Histogram(a) => commands::histogram(a),
        Command::Detect(a) => commands::detect(a),
        Command::Serve(a) => commands::serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}
