//! `ssdet` — semi-supervised detection experiments on a synthetic corpus.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration error,
//! 3 data error, 4 numeric failure.

mod commands;
mod config;
mod presets;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ssdet::error::Error;

use crate::config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "ssdet",
    version,
    about = "Semi-supervised two-stage detection on synthetic scenes",
    after_help = "Environment overrides (applied after the config file): \
                  SSDET_SEED, SSDET_OUT_DIR, SSDET_RUN_NAME, SSDET_CORPUS_DIR, \
                  SSDET_TOTAL_ITERS, SSDET_BURN_IN_ITERS, SSDET_BETA, SSDET_ALPHA, \
                  SSDET_N_PROPOSALS, SSDET_THETA, SSDET_LR, SSDET_LABELED_FRACTION"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic corpus archive.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overwrite an existing archive.
        #[arg(long)]
        force: bool,
        /// Corpus directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Generation seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Burn-in plus semi-supervised training; writes metrics and checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output root (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from a trainer state checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a detector checkpoint on the held-out split.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Summary JSON path (default: next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every variant of a named ablation preset.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// One of: proposal-count, update-rules, soft-hard, ensembles,
        /// beta-sweep, localization, theta-sweep.
        #[arg(long)]
        preset: String,
        /// Concurrent variants (each variant stays single-threaded).
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Output root (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed shared by all variants (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the oracle/invariant suite and report per-check status.
    Verify {
        /// Deliberately corrupt a computation to prove the harness notices
        /// (available: gradient).
        #[arg(long, value_name = "KIND")]
        inject_fault: Option<String>,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig, Error> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => {
            let mut cfg = ExperimentConfig::defaults();
            cfg.apply_env()?;
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Data(_)
        | Error::Io(_)
        | Error::Unsatisfiable(_)
        | Error::EmptyLabeledSet
        | Error::ClassCountMismatch { .. }
        | Error::Serialization(_) => 3,
        Error::NonFinite { .. }
        | Error::NotNormalized { .. }
        | Error::ShapeMismatch { .. }
        | Error::InvalidBox { .. } => 4,
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.cmd {
        Cmd::GenData {
            config,
            force,
            out,
            seed,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(out) = out {
                cfg.corpus_dir = out;
            }
            if let Some(seed) = seed {
                cfg.corpus.gen_seed = seed;
            }
            commands::cmd_gen_data(&cfg, force)?;
            Ok(0)
        }
        Cmd::Train {
            config,
            out,
            seed,
            resume,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            if let Some(seed) = seed {
                cfg.train.seed = seed;
            }
            commands::cmd_train(&cfg, resume.as_deref())?;
            Ok(0)
        }
        Cmd::Eval {
            config,
            checkpoint,
            out,
        } => {
            let cfg = load_config(&config)?;
            commands::cmd_eval(&cfg, &checkpoint, out.as_deref())?;
            Ok(0)
        }
        Cmd::Ablate {
            config,
            preset,
            parallel,
            out,
            seed,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            if let Some(seed) = seed {
                cfg.train.seed = seed;
            }
            commands::cmd_ablate(&cfg, &preset, parallel)?;
            Ok(0)
        }
        Cmd::Verify { inject_fault } => {
            let all_passed = commands::cmd_verify(inject_fault.as_deref())?;
            Ok(if all_passed { 0 } else { 1 })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
