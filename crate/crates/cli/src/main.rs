use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tvpinn_cli::commands::{fit, simulate, verify_bundle, FitOverrides};
use tvpinn_cli::CliError;

#[derive(Parser)]
#[command(name = "tvpinn", version, about = "Fit, simulate and verify the time-varying PINN model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the seeded ensemble and write a result bundle.
    Fit {
        config: PathBuf,
        /// Train a single member with this seed.
        #[arg(long)]
        seed_override: Option<u64>,
        #[arg(long)]
        epochs_override: Option<usize>,
        /// Bundle directory, replacing `output` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Integrate the model and sample synthetic observations.
    Simulate { config: PathBuf },
    /// Compare a bundle against an oracle trajectory CSV.
    Verify { bundle: PathBuf, oracle: PathBuf },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Fit {
            config,
            seed_override,
            epochs_override,
            out,
        } => {
            let overrides = FitOverrides {
                seed: seed_override,
                epochs: epochs_override,
                out,
            };
            let outcome = fit(&config, &overrides)?;
            let s = &outcome.summary;
            println!(
                "wrote {} ({} members, {} aborted, {:.1} s)",
                outcome.output.display(),
                s.members.len(),
                s.aborted.len(),
                s.wall_time_s
            );
            for a in &s.aborted {
                eprintln!("aborted: {}", a.message);
            }
        }
        Command::Simulate { config } => {
            let outcome = simulate(&config)?;
            println!(
                "simulated {} steps, {} observations",
                outcome.trajectory.len() - 1,
                outcome.observations.len()
            );
        }
        Command::Verify { bundle, oracle } => {
            let report = verify_bundle(&bundle, &oracle)?;
            println!("{}", report.render());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
