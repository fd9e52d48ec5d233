//! `avfsnet`: dataset generation, staged training, separation, evaluation
//! and spectrogram plots.
//!
//! Exit codes: 0 success, 1 internal error, 2 configuration, 3 I/O or file
//! format, 4 missing dependency, 5 data mismatch.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use avfsnet::Error;
use clap::{Args, Parser, Subcommand};

use config::Precision;

#[derive(Parser, Debug)]
#[command(name = "avfsnet", version, about = "Audio-visual speech separation for a flexible number of speakers")]
struct Cli {
    /// Root for every relative path given on the command line or in a config.
    #[arg(long, global = true, default_value = ".")]
    run_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a dataset and its manifest.
    GenData(GenDataArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Separate a mixture given one visual stream per candidate speaker.
    Separate(SeparateArgs),
    /// Score a checkpoint on a manifest split.
    Evaluate(EvaluateArgs),
    /// Plot log-mel spectrograms of WAV files.
    Spectrogram(SpectrogramArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Named preset such as desk-2mix, small-3mix or tiny-2and3mix.
    #[arg(long, default_value = "desk-2mix")]
    pub preset: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to data/<preset>.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub stage: u8,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Architecture preset for a fresh stage-1 run: desk, tiny or paper.
    #[arg(long, default_value = "desk")]
    pub model: String,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory; defaults to runs/stage<N>.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Stage 1 only: fine-tune from this stage-1 checkpoint.
    #[arg(long)]
    pub transfer_from: Option<PathBuf>,
    #[arg(long)]
    pub stage1_ckpt: Option<PathBuf>,
    #[arg(long)]
    pub stage2_ckpt: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_train_samples: Option<usize>,
    #[arg(long)]
    pub max_valid_samples: Option<usize>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
}

#[derive(Args, Debug)]
pub struct SeparateArgs {
    pub mixture: PathBuf,
    /// One visual stream (.avfs) per candidate speaker.
    #[arg(required = true)]
    pub visuals: Vec<PathBuf>,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    #[arg(long, default_value = "separated")]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long, required_unless_present = "passthrough")]
    pub ckpt: Option<PathBuf>,
    /// Score the unprocessed mixture instead of a model.
    #[arg(long, conflicts_with = "ckpt")]
    pub passthrough: bool,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// train, valid or test.
    #[arg(long)]
    pub split: Option<String>,
    /// Use ground-truth presence instead of the counting head.
    #[arg(long)]
    pub oracle_probabilities: bool,
    #[arg(long)]
    pub max_samples: Option<usize>,
    #[arg(long, default_value = "eval")]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PlotFormat {
    Png,
    Csv,
}

#[derive(Args, Debug)]
pub struct SpectrogramArgs {
    #[arg(required = true)]
    pub wavs: Vec<PathBuf>,
    #[arg(long, default_value = "spectrogram")]
    pub out: PathBuf,
    /// Clean reference; each panel is annotated with its SI-SDR against it.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Plot linear STFT bins instead of mel bands.
    #[arg(long)]
    pub linear: bool,
    #[arg(long, value_enum, default_value = "png")]
    pub format: PlotFormat,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::EmptyInput(_) | Error::InputTooShort { .. } => 2,
        Error::Io { .. } | Error::Format { .. } | Error::Unsupported(_) | Error::Json(_) | Error::Corrupt(_) => 3,
        Error::MissingDependency(_) => 4,
        Error::DataMismatch(_) | Error::Alignment { .. } | Error::Pairing { .. } | Error::DegenerateSource(_) => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run_dir = cli.run_dir;
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&run_dir, a),
        Command::Train(a) => commands::train(&run_dir, a),
        Command::Separate(a) => commands::separate(&run_dir, a),
        Command::Evaluate(a) => commands::evaluate(&run_dir, a),
        Command::Spectrogram(a) => commands::spectrogram(&run_dir, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
