//! `segpatch` command-line front end.
//!
//! Exit codes: 0 success, 1 invalid input (nothing written), 2 runtime
//! failure.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::{EvaluateArgs, Failure, TrainArgs};
use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "segpatch", version, about = "Adversarial patch training and evaluation for semantic segmentation")]
pub struct Cli {
    /// TOML run configuration; every field has a default.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set loss.gamma=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Rank classes by mean predictive entropy of the transformer surrogate.
    Sensitivity,
    /// Train a patch.
    Train {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Run one batch per stage at the configured resolution and stop.
        #[arg(long)]
        dry_run: bool,
        /// Stop (with a resumable checkpoint) after this many epochs.
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Measure mIoU under clean, random-noise and patch conditions.
    Evaluate {
        /// Patch PNG; omit for a clean-only run.
        #[arg(long)]
        patch: Option<PathBuf>,
        /// Class whose region hosts the patch (default: most sensitive).
        #[arg(long)]
        target_class: Option<usize>,
    },
    /// Train and evaluate one ablation suite.
    Ablate {
        /// placement, patch_size, divergence or grad_align
        #[arg(long)]
        suite: String,
    },
}

fn resolve(cli: &Cli) -> segpatch::Result<RunConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(out) = &cli.out {
        let quoted = toml::Value::String(out.to_string_lossy().into_owned()).to_string();
        overrides.push(format!("out_dir={quoted}"));
    }
    RunConfig::load(cli.config.as_deref(), &overrides)
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let cfg = match resolve(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let result = match &cli.command {
        Command::Sensitivity => commands::cmd_sensitivity(&cfg),
        Command::Train {
            resume,
            dry_run,
            max_epochs,
        } => commands::cmd_train(
            &cfg,
            &TrainArgs {
                resume: resume.clone(),
                dry_run: *dry_run,
                max_epochs: *max_epochs,
            },
        ),
        Command::Evaluate { patch, target_class } => commands::cmd_evaluate(
            &cfg,
            &EvaluateArgs {
                patch: patch.clone(),
                target_class: *target_class,
            },
        ),
        Command::Ablate { suite } => commands::cmd_ablate(&cfg, suite),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            let kind = match f {
                Failure::Validation(_) => "invalid input",
                Failure::Runtime(_) => "failed",
            };
            eprintln!("error ({kind}): {}", f.error());
            f.exit_code()
        }
    }
}
