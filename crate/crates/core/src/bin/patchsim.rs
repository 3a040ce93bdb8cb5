use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use patchsim::cli::{self, Mode, RunOptions};

/// Exit code for unreadable or invalid input.
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(
    name = "patchsim",
    version,
    about = "Implicit time stepping of rigid bodies with patch contact"
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write trajectories, certificates and plot data.
    Simulate {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seed of the randomized first-step guess (first seed in uniqueness mode).
        #[arg(long)]
        seed: Option<u64>,
        /// single, analytic-compare or uniqueness.
        #[arg(long)]
        mode: Option<Mode>,
        /// Number of runs in uniqueness mode.
        #[arg(long)]
        runs: Option<usize>,
        /// Comparison tolerance.
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Report per-column deviations between trajectory files.
    Compare {
        #[arg(required = true, num_args = 2..)]
        trajectories: Vec<PathBuf>,
        /// Fail if any state column deviates by more than this.
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Parse and validate a scenario file.
    Validate { scenario: PathBuf },
}

fn main() -> ExitCode {
    let args = Args::parse();
    match args.command {
        Command::Simulate {
            scenario,
            out,
            seed,
            mode,
            runs,
            tol,
        } => {
            let sc = match cli::load_scenario(&scenario) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_USAGE);
                }
            };
            let options = RunOptions {
                mode,
                seed,
                runs,
                tolerance: tol,
            };
            match cli::run(&sc, &out, &options) {
                Ok(outcome) => {
                    print!("{}", outcome.summary);
                    ExitCode::from(outcome.status.exit_code() as u8)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(EXIT_USAGE)
                }
            }
        }
        Command::Compare { trajectories, tol } => match cli::compare_runs(&trajectories) {
            Ok(report) => {
                println!("steps: {}", report.steps);
                for c in &report.columns {
                    println!(
                        "{:<16} {:<8} {:e}",
                        c.name,
                        format!("{:?}", c.kind).to_lowercase(),
                        c.max
                    );
                }
                println!("max state deviation: {:e}", report.state_max());
                println!("max contact deviation: {:e}", report.contact_max());
                match tol {
                    Some(t) if report.state_max() > t => ExitCode::from(5),
                    _ => ExitCode::SUCCESS,
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(EXIT_USAGE)
            }
        },
        Command::Validate { scenario } => match cli::load_scenario(&scenario) {
            Ok(s) => {
                println!(
                    "ok: {} ({} parts, {} steps of {} s, mode {:?})",
                    s.name,
                    s.body.parts.len(),
                    s.steps,
                    s.h,
                    s.experiment.mode
                );
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(EXIT_USAGE)
            }
        },
    }
}
