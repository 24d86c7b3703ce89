//! `flatsim` command-line experiment runner.
//!
//! Exit codes: 0 success, 1 config error, 2 simulation error (the run
//! still writes every row; failed rows carry `status = error`).

mod commands;
mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Experiment, Format, ValidateConfig, WaferExperiment};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Simulation(String),
    Io(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Simulation(m) => write!(f, "simulation error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Simulation(_) => 2,
        }
    }
}

#[derive(Parser)]
#[command(name = "flatsim", version, about = "Tile-accelerator attention and serving simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML config file.
    config: PathBuf,
    /// Output file; overrides `output` in the config. Stdout when neither is set.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Output encoding; overrides `format` in the config.
    #[arg(short, long, value_enum)]
    format: Option<Format>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one workload/dataflow point.
    Simulate(Common),
    /// Simulate every point of a workload × dataflow grid.
    Sweep(Common),
    /// Print the slice and group the autotuner picks for each workload.
    Autotune(Common),
    /// Estimate wafer-scale decode serving for each plan and batch.
    Wafer(Common),
    /// Run the functional oracle suite.
    Validate(Common),
}

fn base_dir(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Output path: the flag wins; a path from the config is relative to it.
fn out_path(c: &Common, from_config: Option<&Path>) -> Option<PathBuf> {
    c.output.clone().or_else(|| from_config.map(|p| base_dir(&c.config).join(p)))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (outcome, format, path) = match &cli.command {
        Command::Simulate(c) | Command::Sweep(c) | Command::Autotune(c) => {
            let exp: Experiment = config::load(&c.config)?;
            let base = base_dir(&c.config);
            let outcome = match cli.command {
                Command::Simulate(_) => commands::simulate(&exp, &base)?,
                Command::Sweep(_) => commands::sweep(&exp, &base)?,
                _ => commands::autotune(&exp, &base)?,
            };
            (outcome, c.format.unwrap_or(exp.format), out_path(c, exp.output.as_deref()))
        }
        Command::Wafer(c) => {
            let exp: WaferExperiment = config::load(&c.config)?;
            let outcome = commands::wafer(&exp, &base_dir(&c.config))?;
            (outcome, c.format.unwrap_or(exp.format), out_path(c, exp.output.as_deref()))
        }
        Command::Validate(c) => {
            let cfg: ValidateConfig = config::load(&c.config)?;
            let outcome = commands::validate(&cfg)?;
            (outcome, c.format.unwrap_or(cfg.format), out_path(c, cfg.output.as_deref()))
        }
    };
    outcome.table.write(format, path.as_deref())?;
    if outcome.failed > 0 {
        return Err(CliError::Simulation(format!("{} of {} rows failed", outcome.failed, outcome.table.rows.len())));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("flatsim: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
