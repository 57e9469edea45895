//! Command-line surface: synth, calibrate, tune, predict, evaluate, bench,
//! and verify. Exit codes: 0 success, 1 usage error, 2 data error,
//! 3 verification failure.

mod commands;
mod config;
mod error;
mod formats;

use clap::{Parser, Subcommand};
use config::RunConfig;
use error::CliError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "ucp",
    version,
    about = "Utility-driven conformal prediction: calibrate set-valued predictors that keep coverage guarantees while minimizing a downstream set cost"
)]
struct Cli {
    /// TOML run configuration; omit to use built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's miscoverage level.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Override the config's base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic score CSV from the configured task.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Instances to draw (default: the task's samples setting).
        #[arg(long)]
        n: Option<usize>,
        /// Also write the task's hierarchy as an edge-list file.
        #[arg(long)]
        hierarchy_out: Option<PathBuf>,
        /// Also write the separable penalty table.
        #[arg(long)]
        costs_out: Option<PathBuf>,
    },
    /// Calibrate one method on a score file (treated whole as the
    /// calibration fold) and write the predictor record.
    Calibrate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// base, penalized, ratio, or greedy.
        #[arg(long, default_value = "base")]
        method: String,
        /// Penalty weight (penalized method only).
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Three-fold grid selection of the penalty weight, then recalibration
    /// on the fresh fold.
    Tune {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional JSON dump of the per-grid-point losses.
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Emit one line per instance: id, set members, set loss.
    Predict {
        #[arg(long)]
        predictor: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full evaluation report (JSON + aligned table) on a test score file.
    Evaluate {
        #[arg(long)]
        predictor: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out_prefix: String,
    },
    /// Multi-run comparison table across methods.
    Bench {
        #[arg(long)]
        out_prefix: String,
        /// Override the config's run count.
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Run the coverage-sandwich and oracle-optimality suites; exits
    /// nonzero if any check fails.
    Verify {
        /// Monte Carlo trials per method.
        #[arg(long, default_value_t = 200)]
        trials: usize,
        /// Number of oracle-optimality tasks.
        #[arg(long, default_value_t = 50)]
        tasks: usize,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    if let Some(alpha) = cli.alpha {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(CliError::Usage(format!(
                "--alpha {alpha} must lie strictly inside (0, 1)"
            )));
        }
        config.alpha = alpha;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }

    match &cli.command {
        Command::Synth {
            out,
            n,
            hierarchy_out,
            costs_out,
        } => commands::cmd_synth(&config, out, *n, hierarchy_out.as_deref(), costs_out.as_deref()),
        Command::Calibrate {
            scores,
            out,
            method,
            lambda,
        } => commands::cmd_calibrate(&config, scores, out, method, *lambda),
        Command::Tune {
            scores,
            out,
            trace_out,
        } => commands::cmd_tune(&config, scores, out, trace_out.as_deref()),
        Command::Predict {
            predictor,
            scores,
            out,
        } => commands::cmd_predict(&config, predictor, scores, out),
        Command::Evaluate {
            predictor,
            scores,
            out_prefix,
        } => commands::cmd_evaluate(&config, predictor, scores, out_prefix),
        Command::Bench { out_prefix, runs } => commands::cmd_bench(&config, out_prefix, *runs),
        Command::Verify { trials, tasks } => commands::cmd_verify(&config, *trials, *tasks),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
