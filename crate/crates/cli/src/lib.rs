//! Command-line driver: one subcommand per pipeline stage, each reading a
//! shared TOML run config and writing under the configured output directory.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 backend
//! error, 5 incomplete run (rerun with `--resume`).

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use ctxsel_core::lm_backend::BackendKind;

use crate::commands::Context;
use crate::config::{resolve, Overrides, ENV_PREFIX};
pub use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "ctxsel", version, about = "Score, select and analyze instruction-tuning data")]
pub struct Cli {
    /// TOML run config (env: CTXSEL_CONFIG).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random stage (env: CTXSEL_SEED).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (env: CTXSEL_OUTPUT_DIR).
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// `cache-lm` or `remote` (env: CTXSEL_BACKEND).
    #[arg(long, global = true)]
    pub backend: Option<BackendKind>,
    /// Concurrent backend requests (env: CTXSEL_CONCURRENCY).
    #[arg(long, global = true)]
    pub concurrency: Option<usize>,
    /// Continue an interrupted `score` run.
    #[arg(long, global = true)]
    pub resume: bool,
    /// Stop after this many uncached backend calls (env: CTXSEL_MAX_CALLS).
    #[arg(long, global = true)]
    pub max_calls: Option<u64>,
    /// Log filter such as `info` or `debug` (env: CTXSEL_LOG_LEVEL).
    #[arg(long, global = true)]
    pub log_level: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw the assessment set from the configured sources.
    BuildAssessment,
    /// Score every corpus sample against the assessment set.
    Score,
    /// Export the top K% by score, or a baseline subset.
    Select {
        /// `icon`, `random`, `low-ppl` or `top-ppl`.
        #[arg(long, default_value = "icon")]
        method: String,
        /// Overrides selection.k_percent (env: CTXSEL_K_PERCENT).
        #[arg(long)]
        k_percent: Option<f64>,
    },
    /// Label the top K% of scored samples and fit the selector.
    TrainSelector {
        #[arg(long)]
        k_percent: Option<f64>,
    },
    /// Run a trained selector over a pool without any backend calls.
    ApplySelector {
        /// Defaults to `<output_dir>/selector.json`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Pairwise judgments, score and difficulty distributions.
    Analyze {
        #[arg(long)]
        k_percent: Option<f64>,
    },
}

fn env_var(name: &str) -> Option<String> {
    std::env::var(name).ok()
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let config_path = cli
        .config
        .clone()
        .or_else(|| env_var(&format!("{ENV_PREFIX}CONFIG")).filter(|v| !v.is_empty()).map(PathBuf::from));
    let k_percent = match &cli.command {
        Command::Select { k_percent, .. } | Command::TrainSelector { k_percent } | Command::Analyze { k_percent } => {
            *k_percent
        }
        _ => None,
    };
    let flags = Overrides {
        seed: cli.seed,
        output_dir: cli.output_dir.clone(),
        backend: cli.backend,
        concurrency: cli.concurrency,
        log_level: cli.log_level.clone(),
        k_percent,
    };
    let resolved = resolve(config_path.as_deref(), &flags, &env_var)?;
    let _ = env_logger::Builder::new()
        .parse_filters(&resolved.config.log_level)
        .format_timestamp(None)
        .try_init();
    eprint!("{}", resolved.describe());

    let max_calls = match cli.max_calls {
        Some(n) => Some(n),
        None => match env_var(&format!("{ENV_PREFIX}MAX_CALLS")).filter(|v| !v.is_empty()) {
            Some(raw) => Some(
                raw.parse()
                    .map_err(|e| CliError::Config(format!("{ENV_PREFIX}MAX_CALLS={raw:?}: {e}")))?,
            ),
            None => None,
        },
    };
    let ctx = Context {
        resolved,
        resume: cli.resume,
        max_calls,
    };
    match &cli.command {
        Command::BuildAssessment => commands::build_assessment_cmd(&ctx),
        Command::Score => commands::score_cmd(&ctx),
        Command::Select { method, .. } => commands::select_cmd(&ctx, method),
        Command::TrainSelector { .. } => commands::train_selector_cmd(&ctx),
        Command::ApplySelector { model } => commands::apply_selector_cmd(&ctx, model.as_deref()),
        Command::Analyze { .. } => commands::analyze_cmd(&ctx),
    }
}
