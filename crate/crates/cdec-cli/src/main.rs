//! Experiment runner for the cdec toolkit.
//!
//! Settings come from an optional `[section] key = value` config file plus
//! `--set section.key=value` overrides; with neither, built-in desk-scale
//! defaults apply. Exit codes: 0 success, 2 configuration or input-format
//! error, 3 numeric divergence, 4 I/O error.

mod commands;
mod config;
mod data;

use cdec::{CdecError, Result};
use clap::{Parser, Subcommand};
use commands::{CompareOpts, EvalOpts, LandscapeOpts, SolveOpts};
use config::ExperimentConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "cdec",
    about = "Compressed-sensing experiments: conic solves, unrolled decoder training, loss landscapes"
)]
struct Cli {
    /// Config file ([section] key = value lines); defaults apply if omitted
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override one setting, e.g. --set model.layers=10 (repeatable)
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    sets: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reconstruct one test sample with the model-based solver
    Solve {
        /// Test sample index
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Iteration budget per continuation step
        #[arg(long, default_value_t = 500)]
        iters: usize,
        /// Early-stop threshold on the relative x change (0 disables)
        #[arg(long, default_value_t = 0.0)]
        rel_tol: f64,
        /// Continuation steps; overrides [model] continuation_steps
        #[arg(long)]
        continuation_steps: Option<usize>,
        /// Use this checkpoint's analysis operator instead of the identity
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the configured decoder over every seed in [train] seeds
    Train,
    /// Evaluate a checkpoint on the configured dataset
    Eval {
        /// Checkpoint to evaluate
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Scan the loss surface around a checkpoint along two random directions
    Landscape {
        /// Checkpoint to perturb
        #[arg(long)]
        checkpoint: PathBuf,
        /// Grid points per axis (odd, so the origin is on the grid)
        #[arg(long, default_value_t = 25)]
        points: usize,
        /// Half-width of the scan square
        #[arg(long, default_value_t = 1.0)]
        lim: f64,
        /// Cap on test samples used per grid point (0 = all)
        #[arg(long, default_value_t = 200)]
        subset: usize,
    },
    /// Aggregate run records into a seed-averaged table per cell
    Compare {
        /// Directory holding result_s*.json records (default: [output] dir)
        #[arg(long)]
        results_dir: Option<PathBuf>,
    },
    /// Materialize the configured dataset as cache files
    GenData,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let text = match &cli.config {
        Some(path) => std::fs::read_to_string(path).map_err(|e| {
            // a config the user named but the runner cannot read is a
            // configuration error, not an artifact I/O failure
            CdecError::invalid(format!("config '{}': {e}", path.display()))
        })?,
        None => String::new(),
    };
    ExperimentConfig::resolve(&text, &cli.sets)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Solve {
            index,
            iters,
            rel_tol,
            continuation_steps,
            checkpoint,
        } => commands::cmd_solve(
            &cfg,
            &SolveOpts {
                index: *index,
                iters: *iters,
                rel_tol: *rel_tol,
                continuation_steps: *continuation_steps,
                checkpoint: checkpoint.clone(),
            },
        ),
        Command::Train => commands::cmd_train(&cfg),
        Command::Eval { checkpoint } => commands::cmd_eval(
            &cfg,
            &EvalOpts {
                checkpoint: checkpoint.clone(),
            },
        ),
        Command::Landscape {
            checkpoint,
            points,
            lim,
            subset,
        } => commands::cmd_landscape(
            &cfg,
            &LandscapeOpts {
                checkpoint: checkpoint.clone(),
                points: *points,
                lim: *lim,
                subset: *subset,
            },
        ),
        Command::Compare { results_dir } => commands::cmd_compare(
            &cfg,
            &CompareOpts {
                results_dir: results_dir.clone(),
            },
        ),
        Command::GenData => commands::cmd_gen_data(&cfg),
    }
}

fn exit_code_for(err: &CdecError) -> u8 {
    match err {
        CdecError::InvalidArgument(_) | CdecError::Format { .. } => 2,
        CdecError::Diverged { .. } => 3,
        CdecError::Io { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
