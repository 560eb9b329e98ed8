//! `resframe`: dataset generation, clip packing, training, evaluation,
//! fusion and analysis from one binary.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 data error,
//! 4 numeric failure.

mod commands;
mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use resframe::ErrorClass;

#[derive(Parser, Debug)]
#[command(name = "resframe", version, about = "Residual-frame video classification toolkit")]
pub struct Cli {
    /// TOML configuration of the command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; created if missing.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Sample training clips on one thread.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Worker threads; all cores when unset.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic dataset to frame directories.
    Synth,
    /// Precompute evenly spaced test clips into a packed clip file.
    Pack,
    /// Train one network path.
    Train {
        /// Continue from `checkpoint.rmp` in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Predict every video of a manifest and score the predictions.
    Eval,
    /// Average two prediction files and score the result.
    Fuse,
    /// Pearson correlation and ranked differences of per-category accuracy.
    Correlate,
    /// Train and score every combination of an ablation grid.
    Ablate,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Pack => "pack",
            Command::Train { .. } => "train",
            Command::Eval => "eval",
            Command::Fuse => "fuse",
            Command::Correlate => "correlate",
            Command::Ablate => "ablate",
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(resframe::Error),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Core(resframe::Error::io(path, e))
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<resframe::Error> for CliError {
    fn from(e: resframe::Error) -> Self {
        CliError::Core(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
