//! Command line front end: picks a run mode, loads the JSON config, applies
//! the flag overrides, executes, prints the report, and writes the CSV.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use meo_core::config::{self, Mode};
use meo_core::runner;

#[derive(Parser)]
#[command(
    name = "meo",
    version,
    about = "Routed expert layers: cost tables, equivalence and gradient checks, \
             latency benchmarks, and a synthetic training demo"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time the mixed and merged forward paths across the selection sweep.
    Bench(ModeArgs),
    /// Print the exact FLOPs decomposition for the configured profile.
    Flops(ModeArgs),
    /// Sweep seeded configs comparing the merged forward to output mixing.
    Equiv(ModeArgs),
    /// Check analytic gradients against central finite differences.
    Gradcheck(ModeArgs),
    /// Train both layer kinds on seeded synthetic clusters.
    TrainToy(ModeArgs),
}

impl Command {
    fn mode(&self) -> Mode {
        match self {
            Command::Bench(_) => Mode::Bench,
            Command::Flops(_) => Mode::Flops,
            Command::Equiv(_) => Mode::Equiv,
            Command::Gradcheck(_) => Mode::Gradcheck,
            Command::TrainToy(_) => Mode::TrainToy,
        }
    }

    fn args(&self) -> &ModeArgs {
        match self {
            Command::Bench(a)
            | Command::Flops(a)
            | Command::Equiv(a)
            | Command::Gradcheck(a)
            | Command::TrainToy(a) => a,
        }
    }
}

#[derive(Args)]
struct ModeArgs {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Write the CSV here instead of the config's output_path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<(), String> {
    let cli = Cli::parse();
    let mode = cli.command.mode();
    let args = cli.command.args();

    let mut cfg = config::parse_config(&args.config).map_err(|e| e.to_string())?;
    if cfg.mode != mode {
        return Err(format!(
            "config {} sets mode '{}' but the subcommand is '{}'",
            args.config.display(),
            cfg.mode.name(),
            mode.name(),
        ));
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output_path = Some(out.display().to_string());
    }

    let cfg = cfg.effective().map_err(|e| e.to_string())?;
    let output = runner::execute(&cfg).map_err(|e| e.to_string())?;

    let path = cfg.output_path();
    fs::write(path, &output.csv).map_err(|e| format!("writing {path}: {e}"))?;
    print!("{}", output.report);
    println!("\nwrote {path}");

    if output.ok {
        Ok(())
    } else {
        Err(output.failure.unwrap_or_else(|| "run failed".to_string()))
    }
}
