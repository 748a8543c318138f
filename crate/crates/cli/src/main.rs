//! `strata` — simulate, train, eval, and predict from the command line.

use std::path::PathBuf;
use std::process;

use clap::{Args, Parser, Subcommand};

use strata_cli::commands;
use strata_cli::CliError;

#[derive(Parser)]
#[command(
    name = "strata",
    version,
    about = "Layered Poisson cluster models: simulate, train, eval, predict",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args)]
struct Common {
    /// Run configuration file (JSON); built-in defaults apply when omitted
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Random seed; overrides the config file's `seed`
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Worker threads; 0 uses all CPUs (results never depend on this)
    #[arg(long, value_name = "N", default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Draw sequences from a saved model and write them as a dataset
    Simulate {
        /// Model file to sample from
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        /// Number of sequences to draw
        #[arg(long, value_name = "N")]
        n: usize,
        /// Observation window length for every sequence
        #[arg(long = "t-end", value_name = "T")]
        t_end: f64,
        /// Output dataset (JSON lines)
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Also write the hidden layers, one JSON line per sequence
        #[arg(long, value_name = "PATH")]
        hidden: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Fit a model to a dataset given an architecture spec
    Train {
        /// Training dataset (JSON lines)
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// Architecture spec: layer sizes and wiring (JSON)
        #[arg(long, value_name = "PATH")]
        arch: PathBuf,
        /// Output model file
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Optional per-iteration training trace (JSON lines)
        #[arg(long, value_name = "PATH")]
        trace: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score held-out data: log-likelihood per event under a trained model
    Eval {
        /// Trained model file
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        /// Dataset to score (JSON lines)
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// Also write the metrics JSON to this path
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Predict each next event in a dataset; report time RMSE and type accuracy
    Predict {
        /// Trained model file
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        /// Dataset to predict on (JSON lines)
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// Optional per-prediction records (JSON lines)
        #[arg(long, value_name = "PATH")]
        records: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { model, n, t_end, out, hidden, common } => commands::cmd_simulate(
            &model,
            n,
            t_end,
            &out,
            hidden.as_deref(),
            common.config.as_deref(),
            common.seed,
        ),
        Command::Train { data, arch, out, trace, common } => commands::cmd_train(
            &data,
            &arch,
            &out,
            trace.as_deref(),
            common.config.as_deref(),
            common.seed,
            common.threads,
        ),
        Command::Eval { model, data, out, common } => commands::cmd_eval(
            &model,
            &data,
            out.as_deref(),
            common.config.as_deref(),
            common.seed,
            common.threads,
        ),
        Command::Predict { model, data, records, common } => commands::cmd_predict(
            &model,
            &data,
            records.as_deref(),
            common.config.as_deref(),
            common.seed,
            common.threads,
        ),
    }
}

fn main() {
    // Usage errors exit with code 2 (clap's default), matching schema errors.
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        process::exit(e.exit_code());
    }
}
