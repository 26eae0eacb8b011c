use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use agedapt_cli::commands::{apply_overrides, cmd_generate, cmd_grid, cmd_mds, cmd_train, Overrides};
use agedapt_cli::config::ExperimentConfig;

/// Domain-adaptation experiments for regression on feature vectors.
#[derive(Parser)]
#[command(name = "agedapt", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic source/target embedding files.
    Generate {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output directory override.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed override.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model and write metrics plus a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the experiment grid from the [grid] section.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Parallel grid cells.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Recover absolute ages from a pairwise checkpoint via metric MDS.
    Mds {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Pairwise checkpoint path (overrides [mds].checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Embedding file with the items to embed (overrides [mds].data_path).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Two anchors as `id=age,id=age` (overrides [mds].anchors).
        #[arg(long)]
        anchors: Option<String>,
        /// Also dump the dissimilarity matrix and 1-D embedding.
        #[arg(long)]
        dump_matrix: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { config, out, seed } => {
            let overrides = Overrides {
                seed,
                out,
                ..Default::default()
            };
            ExperimentConfig::load(&config).map(|mut c| {
                apply_overrides(&mut c, &overrides);
                c
            })
            .and_then(|c| cmd_generate(&c))
        }
        Command::Train { config, out, seed } => {
            let overrides = Overrides {
                seed,
                out,
                ..Default::default()
            };
            ExperimentConfig::load(&config).map(|mut c| {
                apply_overrides(&mut c, &overrides);
                c
            })
            .and_then(|c| cmd_train(&c))
        }
        Command::Grid {
            config,
            out,
            seed,
            jobs,
        } => {
            let overrides = Overrides {
                seed,
                out,
                ..Default::default()
            };
            ExperimentConfig::load(&config).map(|mut c| {
                apply_overrides(&mut c, &overrides);
                c
            })
            .and_then(|c| cmd_grid(&c, jobs))
        }
        Command::Mds {
            config,
            out,
            seed,
            checkpoint,
            data,
            anchors,
            dump_matrix,
        } => {
            let overrides = Overrides {
                seed,
                out,
                checkpoint,
                data,
                anchors,
                dump_matrix,
                ..Default::default()
            };
            ExperimentConfig::load(&config).map(|mut c| {
                apply_overrides(&mut c, &overrides);
                c
            })
            .and_then(|c| cmd_mds(&c, &overrides))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
