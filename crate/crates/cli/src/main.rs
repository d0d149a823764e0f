mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::{PbtArgs, ProfileKind, TrainArgs};
use config::LoadedConfig;
use error::Result;

/// Scalarized multi-task and multi-domain training experiments.
#[derive(Debug, Parser)]
#[command(name = "scalweight", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Override a config value, e.g. `--set training.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Replace every seed in the config (data, split, training, search).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for sweeps, grids and population search.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one run of the configured method.
    Train {
        #[command(flatten)]
        common: Common,
        /// Replay a weight schedule (JSON) instead of the configured weights.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Train every weight-grid point for every seed and width multiplier.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Add the single-source vertices to the grid.
        #[arg(long)]
        include_vertices: bool,
    },
    /// Population-based search over the weights, then retraining with the found schedule.
    Pbt {
        #[command(flatten)]
        common: Common,
        /// Fraction of the training split held out to rank members.
        #[arg(long)]
        rank_split: Option<f64>,
    },
    /// Gradient-conflict or memory profiles.
    Profile {
        #[command(flatten)]
        common: Common,
        #[arg(value_enum)]
        what: ProfileWhat,
    },
    /// Recompute the sweep summary from the stored run manifests.
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// Write the configured dataset as CSV plus its schema.
    Datagen {
        #[command(flatten)]
        common: Common,
    },
    /// Write plot tables from earlier sweep and profile outputs.
    Export {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProfileWhat {
    Conflicts,
    Memory,
}

fn load(common: &Common) -> Result<LoadedConfig> {
    let mut loaded = config::load_config(&common.config, &common.overrides)?;
    if let Some(seed) = common.seed {
        loaded.config.reseed(seed);
        loaded.config.validate()?;
    }
    Ok(loaded)
}

fn run(cli: Cli) -> Result<PathBuf> {
    match cli.command {
        Command::Train { common, policy, run_id } => commands::train(&load(&common)?, &TrainArgs { policy, run_id }),
        Command::Sweep {
            common,
            include_vertices,
        } => commands::sweep(&load(&common)?, common.jobs, include_vertices),
        Command::Pbt { common, rank_split } => commands::pbt(
            &load(&common)?,
            &PbtArgs {
                jobs: common.jobs,
                rank_split,
            },
        ),
        Command::Profile { common, what } => {
            let kind = match what {
                ProfileWhat::Conflicts => ProfileKind::Conflicts,
                ProfileWhat::Memory => ProfileKind::Memory,
            };
            commands::profile(&load(&common)?, kind, common.jobs)
        }
        Command::Report { common } => commands::report(&load(&common)?),
        Command::Datagen { common } => commands::datagen(&load(&common)?),
        Command::Export { common } => commands::export(&load(&common)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
