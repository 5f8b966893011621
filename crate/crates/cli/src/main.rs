use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gridmhe_cli::config::{EstimatorKind, Scenario};
use gridmhe_cli::{output, report, run, CliError};

/// Simulates a multi-machine grid, synthesizes PMU streams and reconstructs
/// the machine and voltage states with a moving-horizon estimator, a static
/// snapshot estimator, or both.
#[derive(Parser)]
#[command(name = "gridmhe", version, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and write the artifacts to a directory
    Run {
        /// Scenario file (TOML; references the system file it uses)
        config: PathBuf,
        /// Output directory [default: out/<scenario name>]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the measurement-noise seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override which estimators run
        #[arg(long, value_enum)]
        estimator: Option<EstimatorKind>,
        /// Override bad-data rejection (true/false)
        #[arg(long)]
        lnr: Option<bool>,
        /// Override the moving-horizon window length
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Summarize a finished run directory
    Report {
        dir: PathBuf,
        /// Print the raw JSON summary instead of the table
        #[arg(long)]
        json: bool,
    },
}

fn run_command(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Run {
            config,
            out,
            seed,
            estimator,
            lnr,
            horizon,
        } => {
            let mut scn = Scenario::load(&config)?;
            if let Some(seed) = seed {
                scn.seed = seed;
            }
            if let Some(kind) = estimator {
                scn.run.kind = kind;
            }
            if let Some(lnr) = lnr {
                scn.run.lnr = lnr;
            }
            if let Some(horizon) = horizon {
                scn.run.mhe.horizon = horizon;
            }
            scn.revalidate()?;

            let dir = out.unwrap_or_else(|| PathBuf::from("out").join(&scn.name));
            let result = run::run_scenario(&scn)?;
            output::write_artifacts(&scn, &result, &dir)?;
            println!("{}", dir.display());

            // A statically unobservable scenario is an error outcome only
            // when the static estimator is all that was asked for.
            if scn.run.kind == EstimatorKind::Sse {
                if let Some(msg) = result.sse_unobservable {
                    return Err(CliError::SseUnobservable(msg));
                }
            }
            Ok(())
        }
        Command::Report { dir, json } => report::print_report(&dir, json),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("GRIDMHE_LOG", "warn"))
        .format_timestamp(None)
        .init();
    match run_command(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
