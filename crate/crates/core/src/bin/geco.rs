use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use geco_asd::pipeline::{resolve_config, Overrides, Pipeline, RunConfig, Stage};

#[derive(Parser)]
#[command(name = "geco", about = "Generative + contrastive anomalous sound detection")]
struct Cli {
    /// TOML run configuration; defaults apply to anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for feature extraction and scoring (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory for every artifact.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset (or scan `data.dcase_root`) and write the manifest.
    SynthData,
    /// Compute log-Mel features for every clip.
    ExtractFeatures,
    /// Pretrain one PAE per machine type.
    TrainPae,
    /// Train the extractor with reconstruction augmentation.
    TrainGeco,
    /// Compute machine-ID centers from training clips.
    ComputeCenters,
    /// Score test clips and write DCASE-format score files.
    Score,
    /// Grid-search the fusion weight per machine type.
    GridGamma,
    /// AUC / pAUC per ID, per type and overall.
    Evaluate,
    /// ROC and loss curves as SVG.
    Plot,
    /// Compare lambda = 0, 1, 10 and the ramp-up schedule.
    AblateLambda,
    /// Run every stage from data preparation to plotting.
    All,
    /// Print the resolved configuration as TOML.
    ShowConfig {
        /// Start from the desk-scale synthetic preset instead of the defaults.
        #[arg(long)]
        tiny: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> geco_asd::Result<()> {
    let overrides = Overrides {
        seed: cli.seed,
        workers: cli.workers,
        out: cli.out,
    };
    if let Command::ShowConfig { tiny: true } = cli.command {
        print!("{}", RunConfig::tiny_synthetic().to_toml()?);
        return Ok(());
    }
    let config = resolve_config(cli.config.as_deref(), &overrides)?;
    let stage = match cli.command {
        Command::ShowConfig { .. } => {
            print!("{}", config.to_toml()?);
            return Ok(());
        }
        Command::All => return Pipeline::new(config)?.run_all(),
        Command::SynthData => Stage::SynthData,
        Command::ExtractFeatures => Stage::ExtractFeatures,
        Command::TrainPae => Stage::TrainPae,
        Command::TrainGeco => Stage::TrainGeco,
        Command::ComputeCenters => Stage::ComputeCenters,
        Command::Score => Stage::Score,
        Command::GridGamma => Stage::GridGamma,
        Command::Evaluate => Stage::Evaluate,
        Command::Plot => Stage::Plot,
        Command::AblateLambda => Stage::AblateLambda,
    };
    Pipeline::new(config)?.run(stage)
}
