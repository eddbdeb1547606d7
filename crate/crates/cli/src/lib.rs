//! Experiment runner for point-source interpolant diffusions.
//!
//! Each subcommand reads one TOML config, writes its data files into an
//! output directory together with a copy of the effective config and a
//! `manifest.json` of SHA-256 hashes, and exits with
//! 0 (success), 2 (config), 3 (simulation), 4 (fitting) or 5 (failed check).

mod commands;
pub mod config;
mod error;
pub mod output;
mod setup;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::ExperimentConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "follmer", version, about = "Point-source interpolant diffusion experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Base seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker thread cap. Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand, PartialEq, Eq)]
pub enum Command {
    /// Simulate the generative SDE and check its marginals.
    Sample,
    /// Fit a regression drift estimator.
    Fit,
    /// Tabulate g^F, ψ_min and compare path KL for σ and g^F.
    Tune,
    /// Compare KL★ across schedules.
    Invariance,
    /// Run identity, bound and boundary diagnostics.
    Diagnose,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Sample => "sample",
            Command::Fit => "fit",
            Command::Tune => "tune",
            Command::Invariance => "invariance",
            Command::Diagnose => "diagnose",
        }
    }
}

/// Parsed invocation with paths resolved.
pub struct Context {
    pub config: ExperimentConfig,
    pub config_dir: PathBuf,
    pub out: PathBuf,
}

impl Context {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.config_dir.join(p)
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let path = cli
        .global
        .config
        .clone()
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let config = ExperimentConfig::load(&path, cli.global.seed)?;
    let config_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let out = cli
        .global
        .out
        .clone()
        .or_else(|| config.output_dir.as_ref().map(|d| config_dir.join(d)))
        .unwrap_or_else(|| PathBuf::from("out").join(cli.command.name()));
    let ctx = Context {
        config,
        config_dir,
        out,
    };
    let body = || match cli.command {
        Command::Sample => commands::sample(&ctx),
        Command::Fit => commands::fit(&ctx),
        Command::Tune => commands::tune(&ctx),
        Command::Invariance => commands::invariance(&ctx),
        Command::Diagnose => commands::diagnose(&ctx),
    };
    match cli.global.threads {
        Some(0) => Err(CliError::Config("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(CliError::config)?
            .install(body),
        None => body(),
    }
}
