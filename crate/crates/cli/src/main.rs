use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedlora_core::experiment::{load_config, run_experiment, summary_csv};
use fedlora_core::verify::theory_suite;
use fedlora_core::Error;

/// Federated LoRA simulator: protocol comparisons, ablations and theory checks.
#[derive(Parser, Debug)]
#[command(name = "fedlora", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        /// Output directory (overrides `out` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seed list (overrides `seeds`).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Worker threads for independent runs (overrides `workers`).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run the theory-oracle self-checks and print PASS/FAIL per check.
    Verify,
}

fn run(config: PathBuf, out: Option<PathBuf>, seeds: Option<Vec<u64>>, workers: Option<usize>) -> Result<(), Error> {
    let mut cfg = load_config(&config)?;
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    if let Some(seeds) = seeds {
        cfg.seeds = seeds;
    }
    if let Some(w) = workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    let output = run_experiment(&cfg)?;
    print!("{}", summary_csv(&output.summary));
    eprintln!("wrote {} files to {}", output.files.len(), cfg.out_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { config, out, seeds, workers } => match run(config, out, seeds, workers) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(e.exit_code() as u8)
            }
        },
        Command::Verify => {
            let checks = theory_suite();
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("{} passed, {failed} failed", checks.len() - failed);
            if failed == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
