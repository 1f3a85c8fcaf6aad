mod commands;
mod config;
mod manifest;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Relative output paths are resolved against this directory when set.
pub const OUTPUT_ROOT_ENV: &str = "FSCE_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "fsce", version, about = "Few-shot detection with contrastive proposal encodings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus per-key overrides; flags win over the file.
#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long = "cpe.temperature", value_name = "TAU")]
    pub cpe_temperature: Option<String>,
    #[arg(long = "cpe.phi", value_name = "PHI")]
    pub cpe_phi: Option<String>,
    #[arg(long = "cpe.reweight", value_name = "one|linear|expm1")]
    pub cpe_reweight: Option<String>,
    #[arg(long = "cpe.lambda", value_name = "LAMBDA")]
    pub cpe_lambda: Option<String>,
    #[arg(long = "detector.steps", value_name = "N")]
    pub detector_steps: Option<String>,
    #[arg(long = "finetune.steps", value_name = "N")]
    pub finetune_steps: Option<String>,
    #[arg(long = "finetune.variant", value_name = "strong|frozen")]
    pub finetune_variant: Option<String>,
    #[arg(long = "finetune.contrast_dim", value_name = "D")]
    pub finetune_contrast_dim: Option<String>,
    /// Any other config key, e.g. `--set detector.learning_rate=0.02`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic shapes dataset.
    Generate(commands::GenerateArgs),
    /// Sample a balanced K-shot fine-tuning set.
    Split(commands::SplitArgs),
    /// Train the detector on base classes.
    TrainBase(commands::TrainBaseArgs),
    /// Fine-tune a base model on a balanced set.
    Finetune(commands::FinetuneArgs),
    /// Score a model on a dataset.
    Evaluate(commands::EvaluateArgs),
    /// Dataset counts and proposal statistics.
    Stats(commands::StatsArgs),
    /// Write foreground proposal embeddings and cluster statistics.
    ExportEmbeddings(commands::ExportArgs),
    /// Sweep contrastive hyper-parameters.
    Ablate(commands::AblateArgs),
    /// Scatter exported embeddings on their two leading principal axes.
    Plot(commands::PlotArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Split(a) => commands::split(a),
        Command::TrainBase(a) => commands::train_base(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Stats(a) => commands::stats(a),
        Command::ExportEmbeddings(a) => commands::export_embeddings(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Plot(a) => commands::plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
