//! Library side of the `caddm` command-line tool.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error.

pub mod commands;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "caddm",
    version,
    about = "Artifact-detection deepfake pipeline on a procedural face dataset"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config file; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 1 is the reproducible reference mode.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the procedural face dataset.
    Procgen {
        #[command(flatten)]
        common: Common,
    },
    /// Synthesise multi-scale swaps from fake/source pairs.
    Mfs {
        /// Annotation JSON-lines file with fake records and their sources.
        #[arg(long)]
        annotations: PathBuf,
        /// Directory the annotation paths are relative to.
        #[arg(long)]
        images: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a detector (or the plain classifier baseline).
    Train {
        /// Dataset directory written by `procgen`.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score a split and report ACC and frame/video AUC.
    Eval {
        #[arg(long, requires = "data", conflicts_with = "scores")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Evaluate an existing score file instead of running a model.
        #[arg(long, required_unless_present = "checkpoint")]
        scores: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Identity-leakage diagnostics: PCA overlap counts and linear probe.
    Iil {
        #[arg(long, requires = "data", conflicts_with = "features")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Splits to extract features from.
        #[arg(long, value_delimiter = ',', default_value = "train,val,test")]
        splits: Vec<String>,
        /// Use an existing feature dump instead of running a model.
        #[arg(long, required_unless_present = "checkpoint")]
        features: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Draw the top predicted artifact box on each image of a split.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Boxes scoring below this are not drawn.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Maximum number of images to render.
        #[arg(long, default_value_t = 16)]
        limit: usize,
        #[command(flatten)]
        common: Common,
    },
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Procgen { common } => commands::procgen(&common),
        Command::Mfs {
            annotations,
            images,
            common,
        } => commands::mfs(&annotations, &images, &common),
        Command::Train { data, common } => commands::train(&data, &common),
        Command::Eval {
            checkpoint,
            data,
            split,
            scores,
            common,
        } => commands::eval(
            checkpoint.as_deref(),
            data.as_deref(),
            &split,
            scores.as_deref(),
            &common,
        ),
        Command::Iil {
            checkpoint,
            data,
            splits,
            features,
            common,
        } => commands::iil(
            checkpoint.as_deref(),
            data.as_deref(),
            &splits,
            features.as_deref(),
            &common,
        ),
        Command::Viz {
            checkpoint,
            data,
            split,
            threshold,
            limit,
            common,
        } => commands::viz(&checkpoint, &data, &split, threshold, limit, &common),
    }
}

/// Process exit code for an error returned by [`run`].
pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.is::<commands::ConfigError>() {
        2
    } else {
        1
    }
}
