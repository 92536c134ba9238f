//! `aan`: run therapy sessions, baselines and skill models from scenario files.

mod commands;
mod output;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "aan", version, about = "Shape-adaptive assist-as-needed therapy simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Full session with the scripted therapist.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "aan-run")]
        out: PathBuf,
        /// Also write every episode as CSV under `episodes/`.
        #[arg(long)]
        episodes: bool,
    },
    /// Comparison controller on the same scenario.
    Baseline {
        #[arg(long)]
        method: aan_core::baselines::BaselineMethod,
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "aan-baseline")]
        out: PathBuf,
        #[arg(long)]
        episodes: bool,
    },
    /// Proposed controller and both baselines on matched seeds; prints a metric table.
    Compare {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Compare only the first N iterations.
        #[arg(long)]
        iterations: Option<usize>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a skill model on the via-points of finished runs.
    SkillTrain {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        latent: Option<usize>,
    },
    /// Drive a session with via-points from a skill model and no therapist.
    SkillApply {
        model: PathBuf,
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "aan-skill")]
        out: PathBuf,
        #[arg(long)]
        episodes: bool,
    },
    /// Recompute per-iteration metrics of a run directory.
    Metrics { run: PathBuf },
    /// Serve a session to the interactive console.
    Serve {
        scenario: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a scenario file.
    Validate { scenario: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("AAN_LOG_LEVEL", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = classify(&e);
            let body = serde_json::json!({ "error": kind, "message": format!("{e:#}") });
            eprintln!("{body}");
            ExitCode::from(code)
        }
    }
}

/// Exit code and error kind: 2 for invalid scenarios, 3 for diverged
/// simulations, 1 otherwise.
fn classify(e: &anyhow::Error) -> (u8, &'static str) {
    for cause in e.chain() {
        match cause.downcast_ref::<aan_core::Error>() {
            Some(aan_core::Error::Scenario(_)) => return (2, "scenario_invalid"),
            Some(aan_core::Error::Diverged { .. }) => return (3, "diverged"),
            _ => {}
        }
    }
    (1, "failed")
}
