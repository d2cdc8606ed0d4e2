//! `newtonflow <command> --config <path> [--output <dir>] [--threads <n>] [--seed <u64>]`
//!
//! Exit codes: 0 success, 2 configuration, 3 numerical, 4 I/O.

mod config;
mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use crate::config::{parse_config, Value};
use crate::error::CliError;
use crate::run::Command;

const THREADS_ENV: &str = "NEWTONFLOW_THREADS";

#[derive(Debug, Parser)]
#[command(name = "newtonflow", version, about = "Newton and Fisher-scoring flows: particles, transport and comparisons")]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// key = value configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Directory receiving the artifacts and manifest.txt.
    #[arg(long, default_value = "newtonflow-out")]
    output: PathBuf,
    /// Worker threads; falls back to NEWTONFLOW_THREADS, then to all cores.
    #[arg(long, value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,
    /// Overrides the `seed` setting.
    #[arg(long)]
    seed: Option<u64>,
}

fn thread_count(flag: Option<u16>) -> Result<Option<usize>, CliError> {
    if let Some(n) = flag {
        return Ok(Some(n as usize));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::config(format!("{THREADS_ENV} must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(None),
    }
}

fn execute(args: &Args) -> Result<(), CliError> {
    if let Some(n) = thread_count(args.threads)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config(format!("cannot set up {n} threads: {e}")))?;
    }
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Io(format!("{}: {e}", args.config.display())))?;
    let mut cfg = parse_config(&text)?;
    if let Some(seed) = args.seed {
        cfg.set("seed", Value::Seed(seed));
    }
    let outcome = run::run(args.command, &mut cfg)?;
    outcome.write_to(&args.output)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("newtonflow: {e}");
            e.exit_code()
        }
    }
}
