//! `smotion`: synthesize data, featurize, train, sample, evaluate and
//! gradient-check from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Failure classes, each with its own exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: spatial_motion::Error,
    },
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn core(context: impl Into<String>) -> impl FnOnce(spatial_motion::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Core { context, source }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core { source, .. } if source.is_numeric() => 3,
            CliError::Core {
                source: spatial_motion::Error::Config(_),
                ..
            } => 1,
            CliError::Core { .. } => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "smotion", version, about = "Binaural-audio-conditioned motion diffusion pipeline")]
pub struct Cli {
    /// Run configuration (TOML with [paths], [model], [schedule], [training],
    /// [features], [extractor] and [eval] tables).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for featurization.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic paired dataset with a manifest.
    SynthData {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Clip length in seconds.
        #[arg(long, default_value_t = 4.0)]
        duration: f64,
    },
    /// Featurize every manifest entry into the cache.
    Features,
    /// Train the denoiser on the training split.
    Train {
        /// Checkpoint directory (overrides paths.checkpoints).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate motion for one audio clip, or for every clip of a split.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Binaural WAV to condition on.
        #[arg(long, conflicts_with = "split", required_unless_present = "split")]
        audio: Option<PathBuf>,
        /// Sample every entry of this dataset split instead (train, val, test).
        #[arg(long)]
        split: Option<String>,
        /// Source location "x,y,z" in the character's starting frame, or a
        /// file with one "x,y,z" line (or a JSON array) per frame.
        #[arg(long, required_unless_present = "split")]
        ssl: Option<String>,
        #[arg(long, value_parser = ["dull", "neutral", "sensitive"], default_value = "neutral")]
        genre: String,
        /// Reverse diffusion steps (overrides schedule.sample_steps).
        #[arg(long)]
        steps: Option<usize>,
        /// Frames to generate (defaults to the audio length, capped by the model).
        #[arg(long)]
        frames: Option<usize>,
        /// Output motion file, or a directory with --split.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the metric report for generated motions on the test split.
    Eval {
        /// Trained feature extractor; trained on the training split when absent.
        #[arg(long)]
        extractor: Option<PathBuf>,
        /// Directory of `<sample>.motion.json` files; ground truth when absent.
        #[arg(long)]
        generated: Option<PathBuf>,
        /// Also write the report JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op and a miniature denoiser.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
