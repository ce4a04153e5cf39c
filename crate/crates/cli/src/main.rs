//! `slotsam` command-line driver.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error,
//! 3 numerical failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use slotsam::scenes::PromptKind;
use slotsam::training::StageSelection;

#[derive(Parser, Debug)]
#[command(name = "slotsam", version, about = "Slot-injected promptable segmentation with self-training")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides `seed` from the configuration.
    #[arg(long, global = true, value_name = "INT")]
    pub seed: Option<u64>,
    /// Overrides `run_dir` (and the SLOTSAM_RUN_DIR variable).
    #[arg(long, global = true, value_name = "PATH")]
    pub run_dir: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic source and target splits under <run_dir>/data.
    GenData {
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Train; writes report.jsonl, checkpoints and visualisation panels.
    Train {
        #[arg(long, default_value = "all", value_parser = parse_stage)]
        stage: StageSelection,
        /// Continue from <run_dir>/checkpoints/latest.ckpt.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate one model role of a checkpoint.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "anchor", value_parser = ["source", "anchor", "student", "teacher"])]
        role: String,
        /// Comma-separated prompt kinds; defaults to eval.prompt_kinds.
        #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
        prompts: Vec<PromptKind>,
        #[arg(long, default_value = "target_test", value_parser = ["source_train", "target_train", "target_val", "target_test"])]
        split: String,
        /// Report path; defaults to <run_dir>/eval/<role>_<split>.json.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Render panels for the listed sample ids.
    Viz {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "anchor", value_parser = ["source", "anchor", "student", "teacher"])]
        role: String,
        #[arg(long, required = true, value_delimiter = ',')]
        ids: Vec<usize>,
        #[arg(long, default_value = "target_test", value_parser = ["source_train", "target_train", "target_val", "target_test"])]
        split: String,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

fn parse_stage(s: &str) -> Result<StageSelection, String> {
    s.parse().map_err(|e: slotsam::error::Error| e.to_string())
}

fn parse_kind(s: &str) -> Result<PromptKind, String> {
    s.parse().map_err(|e: slotsam::error::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
