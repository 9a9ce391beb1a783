//! `cpq` command-line front end.
//!
//! Exit codes: 0 success, 1 runtime/oracle failure, 2 invalid arguments or
//! input data, 3 output not writable, 4 infeasible threshold-sweep
//! calibration, 5 calibration model mismatch.

mod commands;
mod output;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cpq_core::CpqError;

#[derive(Debug, Parser)]
#[command(name = "cpq", version, about = "Conformal prediction with a query oracle")]
struct Cli {
    /// Worker threads (default: available cores). Results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimator accuracy curves on a known distribution.
    Estimate(commands::EstimateArgs),
    /// Split experiments (optionally a budget sweep) writing a metrics CSV.
    Run(commands::RunArgs),
    /// Fit a calibration model (β* and q*) and write it as JSON.
    Calibrate(commands::CalibrateArgs),
    /// Build prediction sets with a saved calibration model.
    Predict(commands::PredictArgs),
    /// Tune the query threshold β* for a budget.
    TuneBeta(commands::TuneBetaArgs),
}

/// `--data` or `--synthetic`, exactly one.
#[derive(Debug, Clone, Args)]
#[group(required = true, multiple = false)]
pub struct DataArgs {
    /// Replay file (JSONL records {"id","truth","samples"}).
    #[arg(long, value_name = "FILE")]
    pub data: Option<std::path::PathBuf>,
    /// Synthetic benchmark, e.g. `n=500`.
    #[arg(long, value_name = "n=N")]
    pub synthetic: Option<String>,
}

/// Failure carrying the process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(2, message)
    }
}

impl From<CpqError> for CliError {
    fn from(e: CpqError) -> Self {
        let code = match &e {
            CpqError::InvalidParameter(_)
            | CpqError::InvalidInput(_)
            | CpqError::Parse { .. }
            | CpqError::DuplicateId(_)
            | CpqError::UndefinedEstimate
            | CpqError::UnknownLabel(_) => 2,
            CpqError::InfeasibleCalibration { .. } => 4,
            CpqError::ModelMismatch(_) => 5,
            CpqError::Io(_) | CpqError::OracleIo(_) | CpqError::BudgetExhausted { .. } => 1,
        };
        Self::new(code, e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            eprintln!("cpq: cannot configure thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Estimate(a) => commands::estimate(a),
        Command::Run(a) => commands::run(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Predict(a) => commands::predict(a),
        Command::TuneBeta(a) => commands::tune_beta(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cpq: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
