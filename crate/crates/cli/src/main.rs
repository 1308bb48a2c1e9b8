mod commands;
mod config;
mod run;

use std::path::PathBuf;

use anyhow::Result;
use camalign_core::Variant;
use clap::{Args, Parser, Subcommand};

/// Discriminative-map guided report generation on synthetic glyph images.
#[derive(Parser)]
#[command(name = "camalign", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration file plus inline overrides.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Dataset directory (shorthand for `--set data.dir=...`).
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset with 70/10/20 splits.
    Synth(commands::SynthArgs),
    /// Train one variant.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// base, vdmae or full (overrides train.variant).
        #[arg(long)]
        variant: Option<Variant>,
        /// Run directory; defaults to `$CAMALIGN_RUNS_DIR/<variant>-s<seed>`.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Decode reports with a trained run.
    Generate(commands::GenerateArgs),
    /// Score candidate reports against references.
    Evaluate(commands::EvaluateArgs),
    /// Dump visual and textual discriminative maps for samples.
    InspectMaps(commands::InspectArgs),
    /// Train and test all three variants with identical seeds.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory; defaults to `$CAMALIGN_RUNS_DIR/ablation`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train { config, variant, run_dir } => commands::train(&config, variant, run_dir),
        Command::Generate(a) => commands::generate(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::InspectMaps(a) => commands::inspect_maps(&a),
        Command::Ablate { config, out } => commands::ablate(&config, out),
    }
}
