//! Experiment runner: parse a declarative TOML config, dispatch the
//! experiment, and write reproducible CSV/JSON artifacts. Rerunning the same
//! config with the same binary produces byte-identical CSVs regardless of the
//! worker-pool size.

pub mod config;
pub mod experiments;
pub mod output;

use std::path::PathBuf;

use serde_json::json;
use thiserror::Error;

use config::{ConfigError, ExperimentConfig, ExperimentKind};
use experiments::ExperimentOutput;
use output::sha256_hex;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("experiment failed: {0}")]
    Experiment(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Io(_) => 3,
            RunError::Experiment(_) => 1,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub config_path: PathBuf,
    /// Must match the config's experiment when given (the CLI subcommand).
    pub expect_kind: Option<ExperimentKind>,
    pub seed_override: Option<u64>,
    pub out_override: Option<PathBuf>,
    /// Worker pool size; `None` uses the rayon default.
    pub threads: Option<usize>,
}

pub struct Outcome {
    pub pass: bool,
    pub output_dir: PathBuf,
    pub summary: serde_json::Value,
}

fn dispatch(cfg: &ExperimentConfig) -> Result<ExperimentOutput, RunError> {
    match cfg.experiment {
        ExperimentKind::Homogenize => {
            experiments::run_homogenize(cfg, cfg.homogenize.as_ref().expect("validated"))
        }
        ExperimentKind::Degeneracy => {
            experiments::run_degeneracy(cfg, cfg.degeneracy.as_ref().expect("validated"))
        }
        ExperimentKind::PdeConvergence => {
            experiments::run_pde(cfg, cfg.pde_convergence.as_ref().expect("validated"))
        }
        ExperimentKind::Obstacle => {
            experiments::run_obstacle(cfg, cfg.obstacle.as_ref().expect("validated"))
        }
        ExperimentKind::Ergodic => {
            experiments::run_ergodic(cfg, cfg.ergodic.as_ref().expect("validated"))
        }
    }
}

/// Run one experiment config end to end: read and validate, solve inside a
/// dedicated worker pool, write the artifact set plus `summary.json` with the
/// config hash and per-file content hashes.
pub fn run(opts: &RunOptions) -> Result<Outcome, RunError> {
    let text = std::fs::read_to_string(&opts.config_path)?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(kind) = opts.expect_kind {
        if kind != cfg.experiment {
            return Err(ConfigError(format!(
                "subcommand `{kind}` does not match config experiment `{}`",
                cfg.experiment
            ))
            .into());
        }
    }
    if let Some(seed) = opts.seed_override {
        cfg.base_seed = seed;
    }
    if let Some(out) = &opts.out_override {
        cfg.output_dir = out.clone();
    }
    let config_hash = sha256_hex(text.as_bytes());

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.unwrap_or(0))
        .build()
        .map_err(|e| RunError::Experiment(e.to_string()))?;
    let output = pool.install(|| dispatch(&cfg))?;

    let manifest = output.artifacts.write(&cfg.output_dir)?;
    let summary = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "experiment": cfg.experiment.to_string(),
        "config_hash": config_hash,
        "base_seed": cfg.base_seed,
        "seed_override": opts.seed_override,
        "pass": output.pass,
        "results": output.summary,
        "files": manifest,
    });
    std::fs::write(
        cfg.output_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(Outcome { pass: output.pass, output_dir: cfg.output_dir.clone(), summary })
}
