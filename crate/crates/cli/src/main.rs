//! `qfc` — command-line front end for the stochastic optimal control
//! toolkit.
//!
//! Exit codes: 0 on success, 2 when a verification subcommand reaches a
//! verdict other than optimal (the JSON report distinguishes not-optimal
//! from inconclusive), 1 on any input or runtime error.

mod commands;
mod demo;
mod report;
mod scenario;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Flags, Outcome};
use scenario::{load_scenario, CliError, CliResult};

#[derive(Parser)]
#[command(
    name = "qfc",
    version,
    about = "Stochastic optimal control for continuously monitored quantum systems",
    after_help = "Exit codes: 0 success; 2 verification verdict was not optimal; 1 input error."
)]
struct Cli {
    /// Output directory for artifacts (overrides the scenario's [output] block).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Cap on worker threads (default: machine parallelism).
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,

    /// Verification tolerance (default 1e-6).
    #[arg(long, global = true, value_name = "X")]
    tol: Option<f64>,

    /// Base RNG seed, overriding the scenario's [rng] seed.
    #[arg(long, global = true, value_name = "S")]
    seed: Option<u64>,

    /// Grid points per axis, overriding the scenario's [grid] points.
    #[arg(long, global = true, value_name = "N[,N,...]")]
    grid: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate trajectories and write one CSV per path.
    Simulate { scenario: PathBuf },
    /// Monte-Carlo cost-to-go estimate (cost.json).
    Cost { scenario: PathBuf },
    /// Classical optimality verification (verify_classic.json).
    VerifyClassic { scenario: PathBuf },
    /// Viscosity-solution verification (verify_viscosity.json).
    VerifyViscosity { scenario: PathBuf },
    /// Backward dynamic-programming solve (value slices + manifest).
    SolveDp { scenario: PathBuf },
    /// Stationary minimum-time solve (value CSV + manifest).
    SolveTimeOptimal { scenario: PathBuf },
    /// End-to-end three-level feedback study with a pass/fail summary.
    QutritDemo {
        /// Optional qutrit scenario overriding the built-in study numbers.
        scenario: Option<PathBuf>,
    },
}

fn parse_grid_flag(text: &str) -> CliResult<Vec<usize>> {
    let parts: Result<Vec<usize>, _> =
        text.split(',').map(|p| p.trim().parse::<usize>()).collect();
    match parts {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(CliError(format!(
            "--grid expects comma-separated positive integers, got \"{text}\""
        ))),
    }
}

fn run(cli: Cli) -> CliResult<Outcome> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError(format!("worker pool: {e}")))?;
    }
    let flags = Flags {
        out: cli.out,
        tol: cli.tol,
        seed: cli.seed,
        grid: cli.grid.as_deref().map(parse_grid_flag).transpose()?,
    };
    if let Some(t) = flags.tol {
        if !(t > 0.0) || !t.is_finite() {
            return Err(CliError(format!(
                "--tol must be positive and finite, got {t}"
            )));
        }
    }

    match &cli.command {
        Command::Simulate { scenario } => {
            let s = load_scenario(scenario)?;
            commands::simulate(&s, &flags)
        }
        Command::Cost { scenario } => {
            let s = load_scenario(scenario)?;
            commands::cost(&s, &flags)
        }
        Command::VerifyClassic { scenario } => {
            let s = load_scenario(scenario)?;
            commands::verify_classic_cmd(&s, &flags)
        }
        Command::VerifyViscosity { scenario } => {
            let s = load_scenario(scenario)?;
            commands::verify_viscosity_cmd(&s, &flags)
        }
        Command::SolveDp { scenario } => {
            let s = load_scenario(scenario)?;
            commands::solve_dp(&s, &flags)
        }
        Command::SolveTimeOptimal { scenario } => {
            let s = load_scenario(scenario)?;
            commands::solve_time_optimal_cmd(&s, &flags)
        }
        Command::QutritDemo { scenario } => {
            let loaded = scenario.as_ref().map(|p| load_scenario(p)).transpose()?;
            demo::qutrit_demo(scenario.as_deref(), loaded.as_ref(), &flags)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version are not errors.
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::VerdictFailure) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
