use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use scer::cli::{apply_seed_override, execute, load_config, RunConfig};
use scer::Error;

/// Worst-group-robust training with embedding regularization.
#[derive(Parser)]
#[command(name = "scer", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate dataset CSVs plus a JSON manifest.
    Generate(Common),
    /// Run one training run; writes history.csv and final.json.
    Train(Common),
    /// Verify the closed-form theory against Monte Carlo; exits 4 on failure.
    Theory(Common),
    /// Run a hyperparameter grid; writes sweep.csv and per-run outputs.
    Sweep(Common),
    /// Collect finished runs into scatter.csv and summary.md.
    Report(Common),
}

#[derive(clap::Args)]
struct Common {
    /// JSON config with a top-level `command` discriminator.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's seed (base seed for sweeps).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for sweeps; the SCER_JOBS env var takes precedence.
    #[arg(long, default_value_t = 4)]
    jobs: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (expected, common) = match &cli.command {
        Command::Generate(c) => ("generate", c),
        Command::Train(c) => ("train", c),
        Command::Theory(c) => ("theory", c),
        Command::Sweep(c) => ("sweep", c),
        Command::Report(c) => ("report", c),
    };
    let mut config = match load_config(&common.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let actual = match &config {
        RunConfig::Generate(_) => "generate",
        RunConfig::Train(_) => "train",
        RunConfig::Theory(_) => "theory",
        RunConfig::Sweep(_) => "sweep",
        RunConfig::Report(_) => "report",
    };
    if actual != expected {
        eprintln!(
            "error: config at {} declares command `{actual}` but the `{expected}` subcommand was invoked",
            common.config.display()
        );
        return ExitCode::from(2);
    }
    if let Some(seed) = common.seed {
        apply_seed_override(&mut config, seed);
    }
    let jobs = std::env::var("SCER_JOBS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(common.jobs);
    match execute(config, &common.config, &common.out, jobs) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::InvalidConfig { .. } | Error::Schema { .. } => 2,
                _ => 3,
            };
            ExitCode::from(code)
        }
    }
}
