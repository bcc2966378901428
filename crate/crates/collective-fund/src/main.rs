//! Command-line front end: `collective-fund <subcommand> [flags]`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use collective_fund::cli::{
    init_threads, run_compare, run_evaluate, run_fan, run_hetero, run_solve, CliError, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "collective-fund",
    about = "Optimal consumption and investment for collectivised pension funds",
    version
)]
struct Cli {
    /// Flat `key = value` config file; defaults reproduce the benchmark
    /// scenario on the bundled mortality table.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for CSVs (created if missing).
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,

    /// Overrides the Monte Carlo path count (fan, evaluate).
    #[arg(long, global = true)]
    paths: Option<usize>,

    /// Overrides the simulation count (hetero).
    #[arg(long, global = true)]
    sims: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the configured fund and write its policy/value table.
    Solve,
    /// Compare annuity, individual, and collective at the same budget.
    Compare,
    /// Simulate the consumption fan of the configured strategy.
    Fan,
    /// Run the heterogeneous-fund experiment and report optimality ratios.
    Hetero,
    /// Monte Carlo re-evaluation of the solved policy against its own value.
    Evaluate,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    init_threads()?;
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(paths) = cli.paths {
        config.n_paths = paths;
    }
    if let Some(sims) = cli.sims {
        config.n_sims = sims;
    }
    let resolved = config.resolve()?;
    match cli.command {
        Command::Solve => run_solve(&resolved, &cli.out_dir),
        Command::Compare => run_compare(&resolved, &cli.out_dir),
        Command::Fan => run_fan(&resolved, &cli.out_dir),
        Command::Hetero => run_hetero(&resolved, &cli.out_dir),
        Command::Evaluate => run_evaluate(&resolved, &cli.out_dir),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
