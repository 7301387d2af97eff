//! `xhap`: generate traces, train the estimator, run restoration and the
//! link-level experiments from one configuration file.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use xhap_core::config::RunConfig;
use xhap_core::experiments::EXPERIMENTS;
use xhap_core::pipeline::{Command, Pipeline};

#[derive(Parser, Debug)]
#[command(name = "xhap", version, about = "Haptic packet-loss restoration simulator")]
struct Cli {
    /// Configuration file of `section.key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one key, e.g. `--set experiments.steps=100000`. Repeatable;
    /// applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Output directory (same as `run.out`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Global seed (same as `run.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate synthetic train and validation traces.
    GenTraces,
    /// Train the estimator on the generated traces.
    Train,
    /// One-step validation error of the trained model and hold-last.
    Evaluate,
    /// Restore the validation traces over the configured channel.
    Restore,
    /// Run one experiment.
    Experiment {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(EXPERIMENTS))]
        name: String,
    },
    /// Every stage and experiment in order.
    All,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::GenTraces => Command::GenTraces,
            Cmd::Train => Command::Train,
            Cmd::Evaluate => Command::Evaluate,
            Cmd::Restore => Command::Restore,
            Cmd::Experiment { name } => Command::Experiment(name),
            Cmd::All => Command::All,
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut overrides = cli.overrides;
    if let Some(out) = &cli.out {
        overrides.push(format!("run.out={}", out.display()));
    }
    if let Some(seed) = cli.seed {
        overrides.push(format!("run.seed={seed}"));
    }
    let config = RunConfig::load(cli.config.as_deref(), &overrides).context("loading configuration")?;
    let command = Command::from(cli.command);
    let pipeline = Pipeline::new(config)?;
    pipeline
        .run(&command)
        .with_context(|| format!("{command} failed"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
