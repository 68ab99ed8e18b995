//! `zsrl`: data generation, distillation, training, evaluation and ablation
//! from one JSON config.
//!
//! stdout carries exactly one JSON status line; everything else goes to
//! stderr. Exit codes: 0 ok, 1 other failure, 2 config, 3 data problems
//! (class without photos, missing soft-label file, malformed data file),
//! 4 numeric, 5 dimension mismatch.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use zsrl_core::Error;

#[derive(Parser, Debug)]
#[command(
    name = "zsrl",
    version,
    about = "Zero-shot sketch/photo retrieval experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes the dataset TSV and split JSON.
    GenData(Common),
    /// Pretrains the teacher and writes the soft-label table.
    SoftLabels(Common),
    /// Trains the encoder; writes the checkpoint and per-epoch metrics.
    Train(Common),
    /// Scores a checkpoint; writes results JSON and optional top-K lists.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<output_dir>/checkpoint.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Recompute the mAP figures with a brute-force oracle and fail on mismatch.
        #[arg(long)]
        oracle_check: bool,
    },
    /// Runs the five loss configurations over the configured seeds.
    Ablate(Common),
}

/// A failure plus the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Argument(_) => 2,
            Error::Data(_) | Error::Key(_) | Error::Parse { .. } => 3,
            Error::Numeric(_) => 4,
            Error::Shape(_) => 5,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ZSRL_LOG", "info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    let (name, outcome) = match cli.command {
        Command::GenData(c) => ("gen-data", commands::gen_data(&c)),
        Command::SoftLabels(c) => ("soft-labels", commands::soft_labels(&c)),
        Command::Train(c) => ("train", commands::train(&c)),
        Command::Eval {
            common,
            checkpoint,
            oracle_check,
        } => ("eval", commands::eval(&common, checkpoint, oracle_check)),
        Command::Ablate(c) => ("ablate", commands::ablate(&c)),
    };
    match outcome {
        Ok(outputs) => {
            println!("{}", json!({"command": name, "status": "ok", "outputs": outputs}));
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            println!(
                "{}",
                json!({"command": name, "status": "error", "code": f.code, "message": f.message})
            );
            ExitCode::from(f.code)
        }
    }
}
