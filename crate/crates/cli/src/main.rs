use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qnncert_core::QnnError;

mod commands;

/// Exit status when every sample verified robust (or the command succeeded).
pub const EXIT_OK: u8 = 0;
/// At least one sample has an adversarial witness.
pub const EXIT_VULNERABLE: u8 = 10;
/// At least one sample stayed undecided.
pub const EXIT_UNDECIDED: u8 = 11;
/// A self-check found a disagreement.
pub const EXIT_CHECK_FAILED: u8 = 12;

#[derive(Parser)]
#[command(name = "qnncert", version, about = "Robust training and complete verification of quantized networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network from a TOML or JSON run configuration.
    Train(TrainArgs),
    /// Verify L-infinity robustness of a model on an IDX dataset.
    Verify(VerifyArgs),
    /// Clean accuracy of a model on an IDX dataset.
    Eval(EvalArgs),
    /// Build a network that is provably robust on a 1-D dataset.
    Construct(ConstructArgs),
    /// Cross-check the verifier against exhaustive enumeration.
    Selftest(SelftestArgs),
}

#[derive(Args)]
pub struct DataArgs {
    /// IDX image file.
    #[arg(long)]
    pub images: PathBuf,
    /// IDX label file.
    #[arg(long)]
    pub labels: PathBuf,
    /// Use only the first N samples.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    pub config: PathBuf,
    /// Continue from a checkpoint instead of starting fresh.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Write the checkpoint every N steps (needs `output.checkpoint`).
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Stop after N steps in this invocation.
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// No progress lines on stderr.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Radius in input raw units.
    #[arg(long)]
    pub eps: u32,
    /// Seconds per sample; 0 disables the timeout.
    #[arg(long, default_value_t = 20.0)]
    pub timeout: f64,
    /// Budget on processed regions per sample.
    #[arg(long)]
    pub max_regions: Option<u64>,
    /// Bounds and attack only, no branching.
    #[arg(long)]
    pub baseline: bool,
    #[arg(long, env = "QNNCERT_WORKERS", default_value_t = 1)]
    pub workers: usize,
    /// One worker and no timing fields, for reproducible reports.
    #[arg(long)]
    pub deterministic: bool,
    /// Seed of the attack restarts.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Bound logits independently instead of folding the last layer.
    #[arg(long)]
    pub no_elide: bool,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Args)]
pub struct ConstructArgs {
    /// Points as `x:label` pairs separated by commas, or a file holding them.
    #[arg(long)]
    pub points: String,
    /// Radius of the open balls in raw units.
    #[arg(long)]
    pub eps: u32,
    /// Input bit width.
    #[arg(long, default_value_t = 8)]
    pub bits: u32,
    /// Number of classes; defaults to the largest label plus one.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 100)]
    pub instances: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn error_exit_code(e: &QnnError) -> u8 {
    match e {
        QnnError::Config(_) | QnnError::InvalidValue(_) | QnnError::InvalidFormat(_) => 3,
        QnnError::Io(_) => 4,
        QnnError::BadMagic { .. }
        | QnnError::TruncatedFile { .. }
        | QnnError::CorruptHeader { .. }
        | QnnError::CountMismatch { .. } => 5,
        QnnError::ModelFormat(_) => 6,
        QnnError::Shape(_) | QnnError::InvalidLabel { .. } | QnnError::UnsupportedArchitecture(_) => 7,
        QnnError::GapViolation { .. } => 8,
        QnnError::Numeric(_) | QnnError::SingletonRegion | QnnError::BudgetExceeded { .. } => 9,
    }
}

fn report_error(code: &str, message: &str) {
    eprintln!("{}", serde_json::json!({ "error": code, "message": message }));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report_error("usage", e.to_string().trim_end());
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Verify(a) => commands::verify(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Construct(a) => commands::construct(&a),
        Command::Selftest(a) => commands::selftest(&a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            report_error(e.code(), &e.to_string());
            ExitCode::from(error_exit_code(&e))
        }
    }
}
