//! `bbi`: simulate, calibrate and estimate with the shaken-lattice interferometer.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::output::{Metadata, Sink};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("not converged: {0}")]
    Convergence(String),
    #[error("estimation: {0}")]
    Estimation(String),
    #[error(transparent)]
    Core(#[from] bbi_core::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Convergence(_) => 3,
            Self::Estimation(_) => 4,
            Self::Io(_) => 1,
            Self::Core(e) if e.is_convergence() => 3,
            Self::Core(e) if e.is_estimation() => 4,
            Self::Core(bbi_core::Error::Io(_)) => 1,
            Self::Core(_) => 2,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "bbi", version, about = "Shaken-lattice Bloch-band interferometer toolkit")]
struct Cli {
    /// TOML run configuration; defaults are used for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default `bbi-out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; all cores if omitted.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Band structure over the Brillouin zone.
    Bands,
    /// Bloch oscillations under a static force, with a period fit.
    Bloch,
    /// Diffraction from a square lattice pulse.
    Kapitza,
    /// Design the splitting and reflecting waveforms.
    Qoc,
    /// Run the Michelson sequence and record port populations.
    Michelson,
    /// Build empirical response models from a calibration scan.
    Calibrate,
    /// Estimate accelerations from shots.
    Estimate,
    /// Fisher bounds and interrogation-time scaling.
    Sensitivity,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Self::Bands => "bands",
            Self::Bloch => "bloch",
            Self::Kapitza => "kapitza",
            Self::Qoc => "qoc",
            Self::Michelson => "michelson",
            Self::Calibrate => "calibrate",
            Self::Estimate => "estimate",
            Self::Sensitivity => "sensitivity",
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out = Some(o);
    }
    cfg.validate()?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("bbi-out"));
    let sink = Sink::new(dir, Metadata::new(cli.command.name(), &cfg))?;
    match cli.command {
        Command::Bands => commands::bands(&cfg, &sink),
        Command::Bloch => commands::bloch(&cfg, &sink),
        Command::Kapitza => commands::kapitza(&cfg, &sink),
        Command::Qoc => commands::qoc(&cfg, &sink),
        Command::Michelson => commands::michelson(&cfg, &sink),
        Command::Calibrate => commands::calibrate(&cfg, &sink),
        Command::Estimate => commands::estimate(&cfg, &sink),
        Command::Sensitivity => commands::sensitivity(&cfg, &sink),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
