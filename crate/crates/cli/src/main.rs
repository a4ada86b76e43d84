//! `headprobe` command-line driver.
//!
//! Every command reads the same JSON run config and works inside one output
//! directory; later commands consume the files written by earlier ones.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Run;
use config::{Precision, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
}

impl From<headprobe::Error> for CliError {
    fn from(e: headprobe::Error) -> Self {
        match e {
            headprobe::Error::InvalidConfig(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "headprobe",
    version,
    about = "Score, calibrate and ablate inactive attention heads"
)]
struct Cli {
    /// Run config (JSON).
    #[arg(long, global = true, default_value = "headprobe.json")]
    config: PathBuf,
    /// Output directory shared by all commands.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Build the (planted) reference model, draw a corpus and write traces.
    Simulate,
    /// Score every trace with every configured function; write per-function pools.
    Score,
    /// Derive quantile thresholds from the pools.
    Calibrate,
    /// Zero flagged heads and record performance curves.
    Intervene,
    /// IoU, precision, Wasserstein distances and attention PCA.
    Compare,
    /// Summarize every available output as Markdown.
    Report,
}

fn dispatch<T: headprobe::Scalar>(cmd: Command, run: &Run) -> Result<(), CliError> {
    match cmd {
        Command::Simulate => commands::simulate::<T>(run),
        Command::Score => commands::score::<T>(run),
        Command::Calibrate => commands::calibrate::<T>(run),
        Command::Intervene => commands::intervene::<T>(run),
        Command::Compare => commands::compare::<T>(run),
        Command::Report => commands::report(run),
    }
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(&cli.config, cli.seed)?;
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Config("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let run = Run {
        cfg,
        out: cli.out.clone(),
    };
    match run.cfg.precision {
        Precision::F32 => dispatch::<f32>(cli.command, &run),
        Precision::F64 => dispatch::<f64>(cli.command, &run),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("headprobe: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
