//! The `mixerforge` command line: `equiv`, `flops`, `train`, `pareto` and
//! `report`. Each command reads a JSON config, applies `--set` overrides,
//! echoes the effective config into `--out` and exits 0 on success, 1 when
//! a check or training cell fails and 2 on usage or config errors.

mod commands;
mod config;
mod pool;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub use commands::{
    cell_name, cell_score, equiv, flops, flops_rows, pareto, pareto_grid, report, sweep, EquivConfig, FlopsConfig, ModelShape,
    ReportConfig, SweepConfig, SweepOutcome, LATTICE_TOLERANCE, ORACLE_TOLERANCE,
};
pub use config::{apply_override, load};
pub use pool::{run_indexed, thread_cap, THREADS_ENV};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Io(_) | CliError::Failure(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mixerforge", version, about = "Linear-attention mixers, hybrid stacks and FLOP accounting")]
pub struct RunConfig {
    #[command(subcommand)]
    pub command: Command,
    /// JSON config file; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Override a config value, e.g. `--set task.pairs=6`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan-vs-oracle and reduction-lattice checks for every kind.
    Equiv {
        /// Comma-separated kinds; overrides the config list.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        kinds: Option<Vec<String>>,
        /// Perturb one state update (negative control).
        #[arg(long)]
        fault: bool,
    },
    /// Analytic FLOP and cache sweep over lengths, kinds and ratios.
    Flops,
    /// Train every (kind, ratio) cell.
    Train,
    /// Train every cell and emit the cost/score grid and its frontier.
    Pareto,
    /// Schedule, parameter count, cost and cache of one model.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Equiv { .. } => "equiv",
            Command::Flops => "flops",
            Command::Train => "train",
            Command::Pareto => "pareto",
            Command::Report => "report",
        }
    }
}

fn prepare<C: Serialize + DeserializeOwned + Default>(run: &RunConfig, extra: &[String]) -> Result<C, CliError> {
    let mut overrides = run.overrides.clone();
    overrides.extend_from_slice(extra);
    let (config, effective) = load::<C>(run.config.as_deref(), &overrides)?;
    std::fs::create_dir_all(&run.out).map_err(|e| CliError::Io(format!("{}: {e}", run.out.display())))?;
    echo(&run.out, run, effective)?;
    Ok(config)
}

fn echo(out: &Path, run: &RunConfig, effective: serde_json::Value) -> Result<(), CliError> {
    let doc = serde_json::json!({
        "command": run.command.name(),
        "seed": run.seed,
        "config": effective,
    });
    let path = out.join("effective_config.json");
    let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn check(passed: bool, what: &str) -> Result<(), CliError> {
    if passed {
        Ok(())
    } else {
        Err(CliError::Failure(format!("{what} failed")))
    }
}

pub fn execute(run: &RunConfig) -> Result<(), CliError> {
    match &run.command {
        Command::Equiv { kinds, fault } => {
            let mut extra = Vec::new();
            if let Some(kinds) = kinds {
                let list: Vec<String> = kinds
                    .iter()
                    .map(|k| k.trim())
                    .filter(|k| !k.is_empty())
                    .map(|k| format!("{k:?}"))
                    .collect();
                if list.is_empty() {
                    return Err(CliError::Usage("--kinds is empty".into()));
                }
                extra.push(format!("kinds=[{}]", list.join(",")));
            }
            if *fault {
                extra.push("fault=true".into());
            }
            let config: EquivConfig = prepare(run, &extra)?;
            check(equiv(&config, run.seed, &run.out, thread_cap()?)?, "equivalence check")
        }
        Command::Flops => flops(&prepare::<FlopsConfig>(run, &[])?, &run.out),
        Command::Train => {
            let config: SweepConfig = prepare(run, &[])?;
            check(commands::train_cmd(&config, run.seed, &run.out, thread_cap()?)?, "training sweep")
        }
        Command::Pareto => {
            let config: SweepConfig = prepare(run, &[])?;
            check(pareto(&config, run.seed, &run.out, thread_cap()?)?, "training sweep")
        }
        Command::Report => report(&prepare::<ReportConfig>(run, &[])?, &run.out),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let run = match RunConfig::try_parse_from(args) {
        Ok(run) => run,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&run) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("mixerforge: {e}");
            e.exit_code()
        }
    }
}
