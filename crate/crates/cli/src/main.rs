//! `pyoco-lab`: reproducible driver for the toy video-diffusion experiments.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "pyoco-lab",
    version,
    about = "Correlated-noise video diffusion experiments at desk scale"
)]
struct Cli {
    /// Experiment config (`key = value` lines). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads. Results do not depend on this value.
    #[arg(long, global = true, env = "PYOCO_LAB_THREADS")]
    jobs: Option<usize>,

    /// Re-run the command and fail unless every hash matches the existing
    /// run manifest.
    #[arg(long, global = true)]
    verify_manifest: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelChoice {
    Image,
    Video,
    Scratch,
}

impl ModelChoice {
    pub fn dir_name(self) -> &'static str {
        match self {
            ModelChoice::Image => "image",
            ModelChoice::Video => "video",
            ModelChoice::Scratch => "scratch",
        }
    }
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Generate the training and held-out datasets.
    GenData,
    /// Train the image model on single frames.
    TrainImage,
    /// Finetune a video model from the image model under the configured prior.
    FinetuneVideo,
    /// Train a video model from random initialisation.
    TrainScratch,
    /// Generate videos from a trained model.
    Sample {
        /// Number of videos; defaults to `sampler.count`.
        #[arg(long)]
        n: Option<usize>,
        /// Output tensor file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "video")]
        model: ModelChoice,
    },
    /// Map videos back to their noise by integrating the ODE upwards.
    Invert {
        /// Input tensor file (`b × t × c × h × w`).
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// The image model inverts every frame independently.
        #[arg(long, value_enum, default_value = "image")]
        model: ModelChoice,
    },
    /// Invert training frames with the image model and report noise statistics.
    AnalyzeNoise,
    /// Finetune under each (kind, alpha) and score the samples.
    SweepAlpha {
        /// Comma-separated list; `inf` selects the frozen prior.
        #[arg(long)]
        alphas: Option<String>,
    },
    /// Scratch vs finetune vs mixed vs progressive at a shared budget.
    CompareStrategies,
    /// Finite-difference check of the loss gradient of a small f64 model.
    Gradcheck {
        /// Check at most this many parameters, evenly spaced.
        #[arg(long)]
        max_params: Option<usize>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainImage => "train-image",
            Command::FinetuneVideo => "finetune-video",
            Command::TrainScratch => "train-scratch",
            Command::Sample { .. } => "sample",
            Command::Invert { .. } => "invert",
            Command::AnalyzeNoise => "analyze-noise",
            Command::SweepAlpha { .. } => "sweep-alpha",
            Command::CompareStrategies => "compare-strategies",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }
}

/// Missing inputs or bad invocations; exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("{name}: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            eprintln!("{name}: cannot start worker pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    match commands::run(&cli.command, cli.config.as_deref(), cli.verify_manifest) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{name}: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
