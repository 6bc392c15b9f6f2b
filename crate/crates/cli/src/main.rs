//! `pedcast`: generate synthetic corpora, train forecasters, evaluate and predict.
//!
//! Exit codes: 0 ok, 1 other failure, 2 configuration or usage error, 3 data
//! error, 4 non-finite loss, 5 checkpoint error or mismatch, 6 bad query.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pedcast_core::models::{CheckpointError, ModelError, ModelKind};
use pedcast_core::seqdata::{DataError, ImageSize, TrackIoError};
use pedcast_core::synth::SynthError;
use pedcast_core::trainer::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Checkpoint(String),
    #[error("{0}")]
    Query(String),
}

#[derive(Parser, Debug)]
#[command(
    name = "pedcast",
    version,
    about = "Pedestrian trajectory and crossing-action forecasting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write clean and perturbed synthetic track files.
    Generate(GenerateArgs),
    /// Train a forecaster on a track file.
    Train(TrainArgs),
    /// Score a checkpoint or baseline on a track file.
    Eval(EvalArgs),
    /// Forecast one window ending at a given frame.
    Predict(PredictArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for `tracks.jsonl` and `tracks_clean.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Track file; overrides `paths.tracks`.
    #[arg(long)]
    pub tracks: Option<PathBuf>,
    /// Output directory; overrides `paths.output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<ModelKind>,
    /// Observation length.
    #[arg(long = "O")]
    pub obs_len: Option<usize>,
    /// Prediction horizon.
    #[arg(long = "T")]
    pub pred_len: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from the resume state in the output directory.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    /// Repeat the last observed speed and action.
    ConstantVelocity,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "baseline", conflicts_with = "baseline")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, requires_all = ["obs_len", "pred_len"])]
    pub baseline: Option<Baseline>,
    #[arg(long)]
    pub tracks: PathBuf,
    /// Run config whose window and model settings must match the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "O")]
    pub obs_len: Option<usize>,
    #[arg(long = "T")]
    pub pred_len: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long, value_parser = config::parse_image_size, default_value = "1920x1080")]
    pub image_size: ImageSize,
    /// Report per-step ADE and accuracy over the whole horizon.
    #[arg(long)]
    pub horizon_sweep: bool,
    /// Print comma-separated output instead of tables.
    #[arg(long)]
    pub csv: bool,
    /// Directory for `report.csv` and, with a sweep, `sweep.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub tracks: PathBuf,
    #[arg(long)]
    pub track_id: String,
    /// Needed only when the track id occurs in several videos.
    #[arg(long)]
    pub video_id: Option<String>,
    /// Last observed frame.
    #[arg(long, allow_negative_numbers = true)]
    pub frame: i64,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Config(_) => 2,
                CliError::Data(_) => 3,
                CliError::Checkpoint(_) => 5,
                CliError::Query(_) => 6,
            };
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            match e {
                TrainError::NonFinite { .. } => return 4,
                TrainError::Config(_) => return 2,
                TrainError::EmptyTrainSet => return 3,
                TrainError::Checkpoint(_) | TrainError::Resume(_) => return 5,
                _ => continue,
            }
        }
        if let Some(e) = cause.downcast_ref::<SynthError>() {
            return match e {
                SynthError::Config(_) => 2,
                SynthError::Data(_) => 3,
            };
        }
        if let Some(ModelError::Config(_)) = cause.downcast_ref::<ModelError>() {
            return 2;
        }
        if cause.is::<CheckpointError>() {
            return 5;
        }
        if cause.is::<TrackIoError>() || cause.is::<DataError>() {
            return 3;
        }
    }
    1
}

fn render(err: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut prev = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !prev.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
        prev = msg;
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Predict(a) => commands::predict(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", render(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
