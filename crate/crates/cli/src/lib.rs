//! Command-line front end: corpus synthesis, splitting, training, evaluation,
//! prediction and explanation.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use defectscan_core::{Error, ErrorKind};

pub use commands::run;
pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_FORMAT: i32 = 5;

/// Process exit code for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_numerical_abort() {
        return EXIT_NUMERICAL;
    }
    match err.kind() {
        ErrorKind::Config => EXIT_USAGE,
        ErrorKind::Io => EXIT_IO,
        ErrorKind::Format | ErrorKind::Encode => EXIT_FORMAT,
        ErrorKind::Shape | ErrorKind::Domain | ErrorKind::State => EXIT_FAILURE,
    }
}

#[derive(Debug, Parser)]
#[command(name = "defectscan", version, about = "Defect classification for building photographs")]
pub struct Cli {
    /// Log progress to standard error.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled synthetic corpus with defect masks and a manifest.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0.864)]
        positive_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Image side length in pixels.
        #[arg(long, default_value_t = 224)]
        size: usize,
        /// Probability that one labeler disagrees with the truth.
        #[arg(long, default_value_t = 0.05)]
        vote_noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assign train/validation/test splits with a per-class shuffle.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        /// Train, validation and test fractions.
        #[arg(long, value_delimiter = ',', num_args = 3, default_value = "0.7,0.15,0.15")]
        ratios: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output manifest; defaults to rewriting the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain, train the head, fine-tune, and write a run directory.
    Train(TrainArgs),
    /// Evaluate a model file on one split and print a report row.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Run configuration supplying the manifest, cleaning policy and batch size.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Print `id,score,label` for each image.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "image", required = true, num_args = 1..)]
        images: Vec<PathBuf>,
    },
    /// Render a Grad-CAM overlay for one image.
    Gradcam {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Backbone block to explain; the last one by default.
        #[arg(long)]
        layer: Option<usize>,
        /// Explain the negative class instead of the positive one.
        #[arg(long)]
        negative: bool,
        #[arg(long, default_value_t = 0.4)]
        alpha: f64,
    },
    /// Tile augmented variants of one image into a contact sheet.
    Augpreview {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 9)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run configuration supplying the augmentation settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the per-channel activations of one backbone block as a grid.
    Featmaps {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// `first`, `mid`, `last` or a block index.
        #[arg(long, default_value = "first")]
        layer: String,
        /// Output directory; the file is named after the layer.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Parent directory of run directories.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Exact run directory instead of `run-<timestamp>-<seed>` under the parent.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    /// Skip backbone pretraining.
    #[arg(long)]
    pub no_pretrain: bool,
    #[arg(long)]
    pub head_epochs: Option<usize>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    #[arg(long)]
    pub deterministic: bool,
}
