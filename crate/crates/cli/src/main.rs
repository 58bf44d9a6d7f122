mod eval;
mod fitting;
mod simulate;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use spe::SpeError;

/// Smooth prototype equivalence: simulate vector-field samples, fit flows
/// to normal-form prototypes, classify and localize limit cycles.
#[derive(Debug, Parser)]
#[command(name = "spe", version, about)]
struct Cli {
    /// Worker threads for multi-prototype fits and sweeps (default: all
    /// cores). Output does not depend on this value.
    #[arg(long, global = true, env = "SPE_JOBS")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a benchmark system and write `<out>` plus `<out stem>.meta.json`.
    Simulate(simulate::SimulateArgs),
    /// Fit one prototype to a sample file.
    Fit(fitting::FitArgs),
    /// Fit every prototype and report the best match.
    Classify(fitting::ClassifyArgs),
    /// Map a fitted prototype's invariant set back into data space.
    Localize(fitting::LocalizeArgs),
    /// Run an evaluation sweep described by a JSON config.
    Eval(eval::EvalArgs),
}

/// Input and configuration problems exit with 2, numerical failures with 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<SpeError>() {
            return match e {
                SpeError::BlowUp { .. }
                | SpeError::SamplingFailed { .. }
                | SpeError::NonFinite { .. }
                | SpeError::NonFiniteGradient { .. }
                | SpeError::Divergence { .. }
                | SpeError::RootFinding(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => simulate::run(a),
        Command::Fit(a) => fitting::run_fit(a),
        Command::Classify(a) => fitting::run_classify(a),
        Command::Localize(a) => fitting::run_localize(a),
        Command::Eval(a) => eval::run(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.jobs {
        pool = pool.num_threads(j.max(1));
    }
    let outcome = match pool.build() {
        Ok(pool) => pool.install(|| run(cli)),
        Err(e) => Err(e.into()),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// `dir/name.ext` -> `dir/name<suffix>`.
pub(crate) fn sibling(path: &std::path::Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}
