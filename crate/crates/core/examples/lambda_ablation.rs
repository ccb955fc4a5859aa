//! Balance-factor ablation on the synthetic data: lambda = 0, 1, 10 and
//! the ramp-up schedule, each a fresh extractor sharing the same PAEs.
//! Takes a few minutes on one core.

use geco_asd::pipeline::{Pipeline, RunConfig, Stage};

fn main() -> geco_asd::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let config = RunConfig {
        out: std::env::args().nth(1).unwrap_or_else(|| "geco-ablation".into()).into(),
        ..RunConfig::tiny_synthetic()
    };
    let pipeline = Pipeline::new(config)?;
    for stage in [Stage::SynthData, Stage::ExtractFeatures, Stage::TrainPae] {
        pipeline.run(stage)?;
    }
    let rows = pipeline.ablate_lambda()?;
    println!("{:<22} {:>7} {:>7}", "configuration", "AUC", "pAUC");
    for r in rows {
        println!("{:<22} {:>7.2} {:>7.2}", r.configuration, 100.0 * r.auc, 100.0 * r.pauc);
    }
    Ok(())
}
