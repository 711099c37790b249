use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};
use semirobust::config::ExperimentConfig;
use semirobust::run::{run, Stage};

#[derive(Parser, Debug)]
#[command(name = "semirobust", version, about = "Subnetwork semirobustness experiments on small dense networks")]
struct Cli {
    /// Experiment config (TOML); defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root, overriding the config; runs land in `<out>/<config hash>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Stage to run; without one the config's `algorithm` decides.
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Regular and adversarial training; writes checkpoints and training logs.
    Train,
    /// Clean and adversarial accuracy of the standard, robust and semirobust networks.
    AttackEval,
    /// Layer dependencies, probe correlations and per-layer semirobustness.
    Diagnostics,
    /// Learn the layer-dependency thresholds by finetuning the tail.
    RhoLearn,
    /// Solve for linear maps from head activations to the output.
    LambdaSolve,
    /// Compare random tail perturbations against the performance bounds.
    Bounds,
    /// Gather the reports already in the run directory.
    Report,
}

impl From<Command> for Stage {
    fn from(c: Command) -> Self {
        match c {
            Command::Train => Stage::Train,
            Command::AttackEval => Stage::AttackEval,
            Command::Diagnostics => Stage::Diagnostics,
            Command::RhoLearn => Stage::RhoLearn,
            Command::LambdaSolve => Stage::LambdaSolve,
            Command::Bounds => Stage::Bounds,
            Command::Report => Stage::Report,
        }
    }
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    let stage = cli.command.map_or_else(|| Stage::from(cfg.algorithm), Stage::from);
    let record = run(&cfg, stage)?;
    println!("{}", record.run_dir.display());
    for p in &record.artifacts {
        log::info!("wrote {}", p.display());
    }
    Ok(())
}
