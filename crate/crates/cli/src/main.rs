//! `otafl`: optimize amplification plans, run training sweeps, and check the
//! convergence bounds against recorded traces.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exit codes.
pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_SOLVER: u8 = 2;
pub const EXIT_VIOLATION: u8 = 3;

/// Default output root when neither `--out` nor `output_dir` is given.
pub const OUT_DIR_ENV: &str = "OTAFL_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "otafl",
    version,
    about = "Over-the-air federated learning with normalized gradients"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Experiment config (TOML). Every key is optional.
    pub config: Option<PathBuf>,
    /// Output directory. Overrides `output_dir` and $OTAFL_OUT_DIR.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve for Z and the amplification plan; write artifacts.json.
    Optimize {
        #[command(flatten)]
        common: Common,
        /// Also run the grid oracle (K <= 4).
        #[arg(long)]
        oracle: bool,
        #[arg(long, default_value_t = 200)]
        grid: usize,
    },
    /// Run every strategy under every seed; write traces and means.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Comma-separated strategies, overriding the config.
        #[arg(long, value_delimiter = ',')]
        strategy: Vec<String>,
    },
    /// Check the convergence bound against traces written by `train`.
    Bounds {
        #[command(flatten)]
        common: Common,
        /// Directory holding `traces/`; defaults to the output directory.
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Train once per value of one config key, each into `<out>/<key>=<value>`.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Compare the solver's Z with the grid oracle on the configured channel.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        grid: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Optimize { common, oracle, grid } => commands::optimize(&common, oracle.then_some(grid)),
        Command::Train { common, strategy } => commands::train(&common, &strategy),
        Command::Bounds { common, traces } => commands::bounds(&common, traces),
        Command::Sweep { common, param, values } => commands::sweep(&common, &param, &values),
        Command::Oracle { common, grid } => commands::oracle(&common, grid),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(otafl::Error::SolverFailure { .. }) = e.downcast_ref::<otafl::Error>() {
                ExitCode::from(EXIT_SOLVER)
            } else {
                ExitCode::from(EXIT_CONFIG)
            }
        }
    }
}
