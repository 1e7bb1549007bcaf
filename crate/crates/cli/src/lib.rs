//! Command-line driver wiring the whole experimental loop: corpus
//! simulation, the two training stages, probe training and evaluation,
//! the alpha sweep, gradient verification and report emission.

pub mod commands;
pub mod config;
pub mod summary;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;

#[derive(Parser, Debug)]
#[command(
    name = "sealign",
    version,
    about = "Train and evaluate a speech enhancer against a frozen feature encoder"
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Command,
}

/// Flags shared by every config-driven subcommand.
#[derive(Args, Debug, Default)]
pub struct CommonArgs {
    /// Plain-text config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set loss.alpha=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory (overrides the `out` config key).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Top-level seed (overrides the `seed` config key).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic corpus and the frozen encoder.
    Simulate(CommonArgs),
    /// Stage one: train the enhancer on the SNR objective.
    Pretrain(CommonArgs),
    /// Stage two: fine-tune on the multitask feature + SNR objective.
    Finetune(CommonArgs),
    /// Train the frame-classification probe on frozen features.
    TrainProbe(CommonArgs),
    /// Measure SI-SDR and feature distance for every available frontend.
    Evaluate(CommonArgs),
    /// Fine-tune once per alpha and tabulate the tradeoff.
    SweepAlpha(CommonArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(CommonArgs),
    /// Aggregate all result tables into one comparison.
    Report(CommonArgs),
    /// Enhance a WAV file with a trained checkpoint.
    Enhance {
        /// Noisy input WAV (mono 16-bit PCM).
        #[arg(long = "in")]
        input: PathBuf,
        /// Where to write the enhanced WAV.
        #[arg(long)]
        out: PathBuf,
        /// Enhancer checkpoint to load.
        #[arg(long)]
        ckpt: PathBuf,
    },
}

impl CommonArgs {
    pub fn load_config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(
            self.config.as_deref(),
            &self.set,
            self.out.as_deref(),
            self.seed,
        )
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Simulate(args) => commands::simulate(&args.load_config()?),
        Command::Pretrain(args) => commands::pretrain(&args.load_config()?),
        Command::Finetune(args) => commands::finetune(&args.load_config()?),
        Command::TrainProbe(args) => commands::train_probe(&args.load_config()?),
        Command::Evaluate(args) => commands::evaluate(&args.load_config()?),
        Command::SweepAlpha(args) => commands::sweep_alpha(&args.load_config()?),
        Command::Gradcheck(args) => commands::gradcheck(&args.load_config()?),
        Command::Report(args) => commands::report(&args.load_config()?),
        Command::Enhance { input, out, ckpt } => commands::enhance(&input, &out, &ckpt),
    }
}
