//! `insclr` — command-line runner for seeded, reproducible experiments.
//!
//! ```text
//! insclr [--config run.toml] [--set key=value]... [--seed N] [--output-dir DIR] <command>
//! ```
//!
//! Exit status: 0 when every requested artifact was written, 1 on a
//! pipeline failure, 2 on a bad config or command line.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{parse_config, Overrides};
use run::{run_command, Command};

#[derive(Debug, Parser)]
#[command(
    name = "insclr",
    version,
    about = "Instance-level contrastive learning with pseudo-positive mining"
)]
struct Cli {
    /// TOML run config; without one only `--seed` (or `--set seed=N`) is needed.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key by dotted path, e.g. `trainer.batch.n_b=3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Master seed; section seeds not set explicitly are derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for every artifact.
    #[arg(long, global = true, value_name = "DIR")]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset (or import external data) into dataset.json.
    GenData,
    /// Build the top-P candidate pool with the current encoder into pool.json.
    BuildPool,
    /// Train every round; write checkpoints, pools, history, curves and metrics.
    Train,
    /// Evaluate the current encoder into metrics.json.
    Eval {
        /// Also write per-query rankings to rankings.csv.
        #[arg(long)]
        rankings: bool,
    },
    /// Run the mining-variant grid over several seeds into ablation.csv.
    Ablate,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let overrides = Overrides {
        sets: cli.sets,
        seed: cli.seed,
        output_dir: cli.output_dir,
    };
    let cfg = match parse_config(cli.config.as_deref(), &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cmd = match cli.command {
        Cmd::GenData => Command::GenData,
        Cmd::BuildPool => Command::BuildPool,
        Cmd::Train => Command::Train,
        Cmd::Eval { rankings } => Command::Eval { rankings },
        Cmd::Ablate => Command::Ablate,
    };
    match run_command(cmd, &cfg) {
        Ok(artifacts) => {
            for a in artifacts {
                println!("{}", cfg.output_dir.join(a).display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {} failed: {e}", cmd.name());
            ExitCode::from(1)
        }
    }
}
