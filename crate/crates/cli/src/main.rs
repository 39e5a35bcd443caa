//! `sdkrylov gen|solve|compare|sweep --config <path> [--problem <path>] [--out <dir>]`
//!
//! Exit codes: 0 success, 1 config error, 2 I/O error, 3 solver failure.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "sdkrylov",
    version,
    about = "Smooth-plus-sparse hybrid Krylov solvers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a test problem container and its descriptor.
    Gen(Paths),
    /// Run the configured solver and write its history and images.
    Solve(Paths),
    /// Run sdhybr, genhybr and fhybr (and optionally alternating) on the same data.
    Compare(Paths),
    /// Final error over a log grid of fixed parameters.
    Sweep(Paths),
}

#[derive(Debug, clap::Args)]
struct Paths {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    problem: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cmd: Command) -> Result<String, CliError> {
    let (Command::Gen(p) | Command::Solve(p) | Command::Compare(p) | Command::Sweep(p)) = &cmd;
    let cfg = commands::load_config(&p.config)?;
    let out = commands::out_dir(p.out.as_deref(), &cfg)?;
    let problem = p.problem.as_deref();
    match cmd {
        Command::Gen(_) => commands::cmd_gen(&cfg, &out),
        Command::Solve(_) => commands::cmd_solve(&cfg, problem, &out),
        Command::Compare(_) => commands::cmd_compare(&cfg, problem, &out),
        Command::Sweep(_) => commands::cmd_sweep(&cfg, problem, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(msg) => {
            print!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("sdkrylov: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
