//! Command-line front-end: simulation, dictionary construction,
//! training, inference, the least-squares baseline, evaluation, error
//! heatmaps, and hyperparameter sweeps over one artifact convention.

mod cfg;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cfg::CliError;

/// Bump when any artifact layout changes shape.
pub const DATA_FORMAT_VERSION: u32 = 1;

/// Keep the format suffix in sync with DATA_FORMAT_VERSION.
const VERSION_LINE: &str = concat!(env!("CARGO_PKG_VERSION"), " (data format v1)");

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Voxel,
    Neighborhood,
}

#[derive(Parser)]
#[command(name = "fodkit", version = VERSION_LINE)]
#[command(about = "Intravoxel fiber structure from diffusion-weighted volumes")]
pub struct Cli {
    /// Master seed override for the selected subcommand.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Artifact directory (default: out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Worker thread count (default: one per core).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Voxel or neighborhood processing, where the subcommand
    /// distinguishes them.
    #[arg(long, global = true, value_enum)]
    pub mode: Option<ModeArg>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a labeled training dataset or a synthetic test volume.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Build the antipodally symmetric direction dictionary.
    Dict {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a coefficient regressor on a simulated dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run a stored model over a volume.
    Predict {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model directory written by train.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Input volume (.nii).
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        bvals: Option<PathBuf>,
        #[arg(long)]
        bvecs: Option<PathBuf>,
    },
    /// Fit every voxel with non-negative least squares.
    BaselineNnls {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Input volume (.nii).
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        bvals: Option<PathBuf>,
        #[arg(long)]
        bvecs: Option<PathBuf>,
        /// Direction dictionary file.
        #[arg(long = "dict")]
        dictionary: Option<PathBuf>,
    },
    /// Score coefficient maps against simulation ground truth.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Map reconstruction error over crossing geometries.
    Heatmap {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model directory; overrides the config path.
        #[arg(long)]
        model: Option<PathBuf>,
        /// "default" for the built-in grid, or a path to a grid JSON.
        #[arg(long)]
        grid: Option<String>,
    },
    /// Train the loss x activation x optimizer grid with repeats.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
