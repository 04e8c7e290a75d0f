//! `posecascade`: synthetic data, training, inference, evaluation and
//! gradient checks from the command line.

mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] posecascade::Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(posecascade::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "posecascade", version, about = "Cascaded 3D hand pose estimation from depth frames")]
pub struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    pub(crate) config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    pub(crate) seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub(crate) out: PathBuf,
    #[command(subcommand)]
    pub(crate) command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    Synth {
        #[arg(long)]
        count: usize,
    },
    /// Train the Init-CNN and the Pose-REN cascade.
    Train {
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
    },
    /// Predict per-stage poses for every frame of a dataset.
    Infer {
        /// Directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Refinement iterations; defaults to `infer_iterations`.
        #[arg(long)]
        iterations: Option<usize>,
        /// `cnn`, `meanpose`, or a pose table whose last stage seeds stage 0.
        #[arg(long, default_value = "cnn")]
        init_pose: String,
    },
    /// Per-stage joint errors and success-rate curves.
    Eval {
        /// Pose table written by `infer`.
        #[arg(long)]
        pred: PathBuf,
        /// Ground truth: a dataset manifest or a pose table (last stage).
        #[arg(long)]
        gt: PathBuf,
        /// Measure 2D pixel distances instead of millimetres (needs a manifest).
        #[arg(long)]
        pixel: bool,
    },
    /// Finite-difference check of every operation and the tiny networks.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        configs: usize,
        /// Test fixture: negate the conv2d backward rule.
        #[arg(long, hide = true)]
        inject_conv_fault: bool,
    },
    /// Summarise a training directory: parameter counts and final losses.
    Report {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn configure_threads() -> Result<(), CliError> {
    match std::env::var("POSECASCADE_THREADS") {
        Ok(v) => {
            let n: usize = v
                .parse()
                .map_err(|_| CliError::Usage(format!("POSECASCADE_THREADS must be a positive integer, got `{v}`")))?;
            posecascade::parallel::configure_threads(n).map_err(CliError::Usage)
        }
        Err(_) => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| commands::run(&cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
