use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use homlab_cli::config::ExperimentKind;
use homlab_cli::{run, RunOptions};

/// Stochastic homogenization laboratory: run a declarative experiment config
/// and write reproducible CSV/JSON artifacts.
#[derive(Parser)]
#[command(name = "homlab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Path to the experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Replace the config's base seed.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Worker pool size (default: all cores). Artifacts are byte-identical
    /// for any value.
    #[arg(long)]
    threads: Option<usize>,
    /// Replace the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the homogenized density on a gradient sample.
    Homogenize(Common),
    /// Classify the cell-value trend for media with violated moments.
    Degeneracy(Common),
    /// Compare oscillating solutions against the homogenized limit.
    PdeConvergence(Common),
    /// Constrained (obstacle) solves with complementarity certificates.
    Obstacle(Common),
    /// Ergodic averages and the weak-L1 probe.
    Ergodic(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, common) = match cli.command {
        Command::Homogenize(c) => (ExperimentKind::Homogenize, c),
        Command::Degeneracy(c) => (ExperimentKind::Degeneracy, c),
        Command::PdeConvergence(c) => (ExperimentKind::PdeConvergence, c),
        Command::Obstacle(c) => (ExperimentKind::Obstacle, c),
        Command::Ergodic(c) => (ExperimentKind::Ergodic, c),
    };
    let opts = RunOptions {
        config_path: common.config,
        expect_kind: Some(kind),
        seed_override: common.seed_override,
        out_override: common.out,
        threads: common.threads,
    };
    match run(&opts) {
        Ok(outcome) => {
            let summary = outcome.output_dir.join("summary.json");
            if outcome.pass {
                println!("PASS {kind} -> {}", summary.display());
                ExitCode::SUCCESS
            } else {
                eprintln!("FAIL {kind}: see {}", summary.display());
                ExitCode::from(1)
            }
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
