//! `momatrack`: simulate scenes, train the motion matcher, track detection
//! files and score the result.

mod commands;
mod config;
mod error;
mod records;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use config::RunConfig;
use error::CliError;
use moma_core::Association;

#[derive(Debug, Parser)]
#[command(
    name = "momatrack",
    version,
    about = "Motion-aware 3D multi-object tracking"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Configuration override, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Scene seed for `simulate`, training seed for `train`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    force: bool,
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic scenes as detection and ground-truth JSONL.
    Simulate {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes (overrides `num_scenes`).
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Train a model on a simulated data directory.
    Train {
        /// Directory holding detections.jsonl and ground_truth.jsonl.
        #[arg(long)]
        data: PathBuf,
        /// Directory for model.json, per-epoch checkpoints and loss.log.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a per-epoch checkpoint.
        #[arg(long, value_name = "CHECKPOINT")]
        resume: Option<PathBuf>,
    },
    /// Track a detection file.
    Track {
        #[arg(long)]
        detections: PathBuf,
        /// Model or training checkpoint; needed unless a baseline is chosen.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output track file.
        #[arg(long)]
        out: PathBuf,
        /// Use a distance-based association instead of the learned matcher.
        #[arg(long)]
        baseline: Option<Baseline>,
    },
    /// Score a track file against ground truth.
    Eval {
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write per-frame bird's-eye-view coordinates as CSV.
        #[arg(long, value_name = "FILE")]
        bev_dump: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Baseline {
    /// Nearest latest position within the gate, taken greedily.
    Greedy,
    /// Hungarian matching against constant-velocity predictions.
    OutputSpace,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Simulate { out, scenes } => {
            if let Some(seed) = cli.seed {
                cfg.scene.seed = seed;
            }
            if let Some(n) = scenes {
                cfg.num_scenes = n;
            }
            cfg.validate()?;
            commands::simulate(&cfg, &out, cli.force)
        }
        Command::Train { data, out, resume } => {
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            commands::train(&cfg, &data, &out, resume.as_deref(), cli.force)
        }
        Command::Track {
            detections,
            checkpoint,
            out,
            baseline,
        } => {
            if let Some(b) = baseline {
                cfg.tracker.association = match b {
                    Baseline::Greedy => Association::Greedy,
                    Baseline::OutputSpace => Association::OutputSpace,
                };
            }
            commands::track(&cfg, &detections, checkpoint.as_deref(), &out, cli.force)
        }
        Command::Eval {
            tracks,
            gt,
            out,
            bev_dump,
        } => {
            let report = commands::eval(
                &cfg,
                &tracks,
                &gt,
                out.as_deref(),
                bev_dump.as_deref(),
                cli.force,
            )?;
            print!("{}", report.to_table());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
