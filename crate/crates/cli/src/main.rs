use std::path::PathBuf;
use std::process::ExitCode;

use accel_ode_cli::commands::{self, Inputs};
use accel_ode_cli::config::Overrides;
use accel_ode_cli::CliError;
use clap::{Args, Parser, Subcommand};

/// One-step accelerated least-squares estimation for ODE models.
#[derive(Parser)]
#[command(name = "accel-ode", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate parameters from an observation CSV
    Fit(Common),
    /// Write one simulated dataset for a scenario as CSV
    Simulate(Common),
    /// Run a Monte Carlo study and print Mean/Coverage and STE/ASYM tables
    Mc(Common),
    /// Print the tables of a saved JSON report (given with --data)
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// catalog model name
    #[arg(long)]
    model: Option<String>,
    /// TOML run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// input file: observations for `fit`, a JSON report for `report`
    #[arg(long)]
    data: Option<PathBuf>,
    /// output file: JSON report, CSV for `simulate`, text for `report`
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// worker threads (default: available parallelism)
    #[arg(long)]
    jobs: Option<usize>,
    /// confidence level [default: 0.95]
    #[arg(long)]
    level: Option<f64>,
}

type Handler = fn(&Inputs) -> Result<String, CliError>;

fn run(cli: Cli) -> Result<String, CliError> {
    let (f, c): (Handler, Common) = match cli.command {
        Command::Fit(c) => (commands::fit, c),
        Command::Simulate(c) => (commands::simulate, c),
        Command::Mc(c) => (commands::mc, c),
        Command::Report(c) => (commands::report, c),
    };
    if let Some(j) = c.jobs {
        if j == 0 {
            return Err(CliError::parse("argument parsing", "--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global().map_err(|e| CliError::parse("argument parsing", e))?;
    }
    let inputs = Inputs {
        config: c.config,
        data: c.data,
        out: c.out,
        overrides: Overrides { model: c.model, seed: c.seed, level: c.level },
    };
    f(&inputs)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("accel-ode: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
