//! `pss`: train, sweep, bench and visualize ViTs with patch sampling schedules.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;
use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "pss", version, about = "Vision Transformer training with patch sampling schedules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Cap on worker threads for evaluation.
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes metrics.csv, epochs.csv, config.cfg and checkpoints/.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Accuracy, throughput and FLOPs of a checkpoint across keep rates; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Comma-separated keep rates.
        #[arg(long, value_name = "LIST")]
        rhos: Option<String>,
    },
    /// Training-iteration wall clock per keep rate; writes bench.csv.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "LIST")]
        rhos: Option<String>,
    },
    /// Kept-patch masks (PPM) and keep-frequency maps (CSV).
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Comma-separated validation image indices.
        #[arg(long, value_name = "LIST")]
        images: Option<String>,
        #[arg(long, value_name = "LIST")]
        rhos: Option<String>,
    },
}

fn resolve(common: &Common, extra: Vec<String>) -> Result<RunConfig, CliError> {
    let mut overrides = common.set.clone();
    if let Some(out) = &common.out {
        overrides.push(format!("out={}", out.display()));
    }
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(t) = common.threads {
        overrides.push(format!("threads={t}"));
    }
    overrides.extend(extra);
    let cfg = RunConfig::load(common.config.as_deref(), &overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn extras(checkpoint: &Option<PathBuf>, rhos: &Option<String>, images: &Option<String>) -> Vec<String> {
    let mut v = Vec::new();
    if let Some(c) = checkpoint {
        v.push(format!("checkpoint={}", c.display()));
    }
    if let Some(r) = rhos {
        v.push(format!("rhos={r}"));
    }
    if let Some(i) = images {
        v.push(format!("image_ids={i}"));
    }
    v
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train { common } => commands::train(&resolve(common, Vec::new())?),
        Command::Sweep { common, checkpoint, rhos } => commands::sweep_cmd(&resolve(common, extras(checkpoint, rhos, &None))?),
        Command::Bench { common, checkpoint, rhos } => commands::bench(&resolve(common, extras(checkpoint, rhos, &None))?),
        Command::Visualize {
            common,
            checkpoint,
            images,
            rhos,
        } => commands::visualize(&resolve(common, extras(checkpoint, rhos, images))?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
