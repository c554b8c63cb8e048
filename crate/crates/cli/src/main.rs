use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use relanchor::experiment::{run, Command, ExperimentConfig, ExperimentError};

/// Domain-incremental learning with aligned visual and textual anchors.
#[derive(Debug, Parser)]
#[command(name = "relanchor", version)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set loss.lambda=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (default: $RELANCHOR_OUT, then ./relanchor-out).
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(short, long)]
    verbose: bool,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Generate the benchmark and write it as JSON.
    GenData(Common),
    /// Train every domain in order and write a checkpoint.
    Train(Common),
    /// Evaluate a checkpoint and write metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate (default: <out>/checkpoint.json).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sweep loss variants, weights, prompt lengths, share mode and orders.
    Ablate(Common),
    /// Search the identification layers.
    LayerSearch(Common),
    /// Compare identification strategies on one trained model.
    IdCompare(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path, &common.overrides)?,
        None => ExperimentConfig::resolve("", &common.overrides)?,
    };
    if let Some(out) = &common.out {
        cfg.output_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common) = match cli.command {
        Sub::GenData(c) => (Command::GenData, c),
        Sub::Train(c) => (Command::Train, c),
        Sub::Eval { common, checkpoint } => (Command::Eval { checkpoint }, common),
        Sub::Ablate(c) => (Command::Ablate, c),
        Sub::LayerSearch(c) => (Command::LayerSearch, c),
        Sub::IdCompare(c) => (Command::IdCompare, c),
    };
    let level = if common.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();

    match load(&common).and_then(|cfg| run(&command, &cfg)) {
        Ok(artifacts) => {
            for path in artifacts {
                println!("{}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("relanchor {}: {e}", command.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
