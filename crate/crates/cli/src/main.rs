mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::ConfigError;

/// Spectral concentration estimation and molecular communication link simulation.
#[derive(Debug, Parser)]
#[command(name = "mcspec", version, about)]
pub struct Cli {
    /// Run configuration (TOML); defaults apply when omitted
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Directory receiving every output of the run
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,

    /// Overrides every seed in the config
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Suppress progress and summary output
    #[arg(long, short, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit per-wavelength extinction profiles from a labeled dataset
    FitExtinction,
    /// Generate a simulated labeled dataset
    GenDataset,
    /// Train the fractal CNN regressor
    Train,
    /// Evaluate an estimator on a labeled dataset
    Eval {
        /// `.fcnn` checkpoint, or `least-squares`
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Simulate a CSK transmission and decode it
    SimulateLink,
}

/// 1 for I/O and file format problems, 2 for configuration or usage errors,
/// 3 for domain and calibration failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<mcspec::Error>() {
            return match e {
                mcspec::Error::Usage(_) => 2,
                mcspec::Error::Domain(_) | mcspec::Error::Calibration { .. } => 3,
                mcspec::Error::Format(_)
                | mcspec::Error::Truncated { .. }
                | mcspec::Error::Io(_)
                | mcspec::Error::Json(_) => 1,
            };
        }
        if cause.is::<ConfigError>() {
            return 2;
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 1;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
