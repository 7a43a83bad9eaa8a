//! Command-line front end: `gen-pop`, `estimate`, `bootstrap`, `mc` and
//! `verify`, each driven by one JSON config.

pub mod config;
pub mod error;
pub mod run;

use std::path::PathBuf;

use clap::Parser;

pub use config::{load_config, parse_config, CommandKind, Overrides, RunConfig};
pub use error::CliError;
pub use run::execute;

#[derive(Debug, Parser)]
#[command(name = "survey-coupling", version, about = "Two-stage survey estimation, coupling checks and Monte Carlo studies")]
pub struct Cli {
    pub command: CommandKind,
    /// JSON config for the command.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for replicate loops; results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory (default `out`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Cli {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            threads: self.threads,
            out: self.out.clone(),
        }
    }
}

/// Loads, validates and executes; returns the files written.
pub fn run_cli(cli: &Cli) -> Result<Vec<String>, CliError> {
    let cfg = load_config(cli.command, &cli.config, &cli.overrides())?;
    execute(&cfg)
}
