//! `optonet` command-line driver.
//!
//! Exit codes: 0 success, 1 usage, 2 validation, 3 runtime.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use config::{DatasetKind, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{module}: {source}")]
    Runtime {
        module: &'static str,
        #[source]
        source: optonet::Error,
    },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime { .. } | CliError::Io(_) => 3,
        }
    }

    fn report(&self) -> serde_json::Value {
        let (kind, module) = match self {
            CliError::Validation(_) => ("validation", "config"),
            CliError::Runtime { module, .. } => ("runtime", *module),
            CliError::Io(_) => ("runtime", "io"),
        };
        json!({ "status": "error", "kind": kind, "module": module, "message": self.to_string() })
    }
}

#[derive(Debug, Parser)]
#[command(name = "optonet", version, about = "Digital twin of a multilayer optoelectronic neural network")]
struct Cli {
    /// TOML run configuration; every section is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent directory of the run directories.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// MNIST IDX directory; falls back to the config, then OPTONET_DATA_DIR.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    dataset: Option<DatasetKind>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the preprocessed train and test splits as CSV.
    PrepareData,
    /// Train the hardware-constrained network.
    Train,
    /// Rasterize a checkpoint into amplitude masks (PGM plus JSON sidecar).
    CompileMask,
    /// Measure simulated per-weight responses and transfer checkpoint weights.
    Calibrate,
    /// Evaluate a checkpoint at the configured fidelity levels.
    Infer,
    /// Scaling sweeps of the accelerator energy model.
    EnergyScan,
    /// Full pipeline for one workload.
    Reproduce {
        #[arg(value_enum)]
        target: DatasetKind,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::PrepareData => "prepare-data",
            Command::Train => "train",
            Command::CompileMask => "compile-mask",
            Command::Calibrate => "calibrate",
            Command::Infer => "infer",
            Command::EnergyScan => "energy-scan",
            Command::Reproduce { .. } => "reproduce",
        }
    }
}

/// Config file, then flags, then the data-directory environment default.
fn effective_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => config::parse_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(t) = cli.threads {
        cfg.threads = Some(t);
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(d) = &cli.data_dir {
        cfg.paths.data_dir = Some(d.clone());
    }
    if cfg.paths.data_dir.is_none() {
        cfg.paths.data_dir = std::env::var_os("OPTONET_DATA_DIR").map(PathBuf::from);
    }
    if let Some(c) = &cli.checkpoint {
        cfg.paths.checkpoint = Some(c.clone());
    }
    if let Some(k) = cli.dataset {
        cfg.dataset.kind = k;
    }
    if let Command::Reproduce { target } = cli.command {
        cfg.dataset.kind = target;
    }
    cfg.validate()?;
    Ok(cfg.resolved())
}

fn dispatch(command: &Command, cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    match command {
        Command::PrepareData => commands::prepare_data(cfg, dir),
        Command::Train => commands::train_cmd(cfg, dir),
        Command::CompileMask => commands::compile_mask_cmd(cfg, dir),
        Command::Calibrate => commands::calibrate(cfg, dir),
        Command::Infer => commands::infer(cfg, dir),
        Command::EnergyScan => commands::energy_scan(cfg, dir),
        Command::Reproduce { .. } => commands::reproduce(cfg, dir),
    }
}

fn run(cli: &Cli) -> Result<PathBuf, CliError> {
    let cfg = effective_config(cli)?;
    if let Some(t) = cfg.threads {
        optonet::exec::configure_threads(t).map_err(|e| CliError::Validation(e.to_string()))?;
    }
    let dir = commands::create_run_dir(&cfg.output_dir, cli.command.name())?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let marker = dir.join("INCOMPLETE");
    std::fs::write(&marker, "run did not finish\n")?;
    match dispatch(&cli.command, &cfg, &dir) {
        Ok(()) => {
            std::fs::remove_file(&marker)?;
            Ok(dir)
        }
        Err(e) => {
            let _ = std::fs::write(dir.join("error.json"), e.report().to_string());
            Err(e)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.report());
            ExitCode::from(e.code())
        }
    }
}
