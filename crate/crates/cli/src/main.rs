use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod cmd;
mod manifest;

#[derive(Debug, Parser)]
#[command(
    name = "panelnet",
    version,
    about = "Recover social interaction networks and effect parameters from panel data"
)]
struct Cli {
    #[command(flatten)]
    flags: RunFlags,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
pub struct RunFlags {
    /// Override the seed from the config file (or its default).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for output files; a run manifest is written alongside them.
    #[arg(long, global = true, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// Worker threads, 0 = one per core.  Affects wall time only, never an
    /// output byte.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a balanced panel from a structural model config.
    Simulate {
        /// TOML config with network, parameters, periods, and shocks.
        config: PathBuf,
    },
    /// Estimate the network and effect parameters from a panel CSV.
    Estimate {
        /// Panel in long CSV form, as written by `simulate`.
        panel: PathBuf,
        /// Optional TOML config with [gmm] and [penalty] tables.
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        /// Pin the penalty grids to one `l1:l1-adaptive:l2` point.
        #[arg(long, value_name = "L1:L1A:L2")]
        grid: Option<String>,
    },
    /// Run a simulation campaign across panel lengths.
    Campaign {
        /// TOML campaign config.
        config: PathBuf,
    },
    /// Print summary statistics for a network edge list.
    Stats {
        /// Network edge list CSV (source, target, weight).
        network: PathBuf,
        /// Edges with weight at or above this count as strong.
        #[arg(long, default_value_t = 0.5)]
        strong_threshold: f64,
    },
    /// Propagate a unit shock through two candidate networks and compare.
    Counterfactual {
        /// TOML config naming the two networks, rho, origin, and shock size.
        config: PathBuf,
    },
    /// Check the identification assumptions at a parameter point.
    Check(cmd::CheckArgs),
    /// Wald test that every unit's interaction weights sum to one.
    RowsumTest {
        /// Panel in long CSV form.
        panel: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.flags.threads > 0 {
        // The binary owns the worker pool; library code only ever uses the
        // current rayon pool.  A failure here means a pool already exists,
        // which is fine.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.flags.threads)
            .build_global();
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            // Input and config problems exit 2, numerical failures 3.
            ExitCode::from(if err.is_input_error() { 2 } else { 3 })
        }
    }
}

fn dispatch(cli: &Cli) -> panelnet::Result<()> {
    match &cli.command {
        Command::Simulate { config } => cmd::simulate(&cli.flags, config),
        Command::Estimate { panel, config, grid } => {
            cmd::run_estimate(&cli.flags, panel, config.as_deref(), grid.as_deref())
        }
        Command::Campaign { config } => cmd::campaign(&cli.flags, config),
        Command::Stats { network, strong_threshold } => {
            cmd::stats(&cli.flags, network, *strong_threshold)
        }
        Command::Counterfactual { config } => cmd::counterfactual(&cli.flags, config),
        Command::Check(args) => cmd::check(&cli.flags, args),
        Command::RowsumTest { panel } => cmd::rowsum_test(&cli.flags, panel),
    }
}
