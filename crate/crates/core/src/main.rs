//! Experiment runner.  Each subcommand is one pipeline stage over a run
//! directory; chain them (gen-data, pretrain, update, eval, report) to go
//! from nothing to a summary table.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pluglm::config::ExperimentConfig;
use pluglm::error::{Error, Result};
use pluglm::runner;

#[derive(Parser)]
#[command(
    name = "pluglm",
    version,
    about = "Continual knowledge updates via selector-gated plug-in adapters, at desk scale"
)]
struct Cli {
    /// Experiment config (TOML).  Defaults are a complete toy experiment.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run directory for artifacts.  Overrides PLUGLM_OUT_DIR and the
    /// config's out_dir.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Override the world seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the update regime (finetune, recadam, lora, gated_lora,
    /// kadapter, gated_kadapter).
    #[arg(long, global = true)]
    regime: Option<String>,

    /// Pin the gate threshold instead of sweeping it.
    #[arg(long, global = true)]
    delta: Option<f64>,

    /// Override the adapter rank.
    #[arg(long, global = true)]
    rank: Option<usize>,

    /// Override the adapter placement (attention_qv, feed_forward, all).
    #[arg(long, global = true)]
    placement: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world and write dataset.jsonl.
    GenData,
    /// Train the base model on the source knowledge (resumes if capped).
    Pretrain,
    /// Apply the configured update regime, one phase at a time.
    Update,
    /// Score the base and updated systems on every split.
    Eval,
    /// Summarize the eval reports into summary.csv.
    Report,
}

fn effective_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.world.seed = seed;
    }
    if let Some(regime) = &cli.regime {
        cfg.update.regime = regime.clone();
    }
    if let Some(delta) = cli.delta {
        cfg.update.delta = Some(delta);
        cfg.update.sweep = Some(false);
    }
    if let Some(rank) = cli.rank {
        cfg.update.rank = Some(rank);
    }
    if let Some(placement) = &cli.placement {
        cfg.update.placement = Some(placement.clone());
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.display().to_string();
    } else if let Ok(dir) = std::env::var("PLUGLM_OUT_DIR") {
        cfg.out_dir = dir;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    let run_dir = PathBuf::from(&cfg.out_dir);
    match cli.command {
        Command::GenData => runner::gen_data(&cfg, &run_dir),
        Command::Pretrain => runner::pretrain(&cfg, &run_dir),
        Command::Update => runner::update(&cfg, &run_dir),
        Command::Eval => runner::eval(&cfg, &run_dir),
        Command::Report => runner::report(&cfg, &run_dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code_of(&e))
        }
    }
}

fn exit_code_of(e: &Error) -> u8 {
    e.exit_code() as u8
}
