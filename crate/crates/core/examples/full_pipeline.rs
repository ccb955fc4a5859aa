//! Runs every stage of the desk-scale synthetic configuration and prints
//! the metrics table. Equivalent to `geco all` with the tiny preset.
//!
//! cargo run --release --example full_pipeline -- [out_dir]

use geco_asd::pipeline::{Pipeline, RunConfig};

fn main() -> geco_asd::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let config = RunConfig {
        out: std::env::args().nth(1).unwrap_or_else(|| "geco-tiny".into()).into(),
        ..RunConfig::tiny_synthetic()
    };
    let pipeline = Pipeline::new(config)?;
    let start = std::time::Instant::now();
    pipeline.run_all()?;
    let result = pipeline.read_metrics()?;
    for m in &result.per_id {
        println!("{:<7} id {:02}  AUC {:6.2}  pAUC {:6.2}", m.machine_type, m.machine_id, 100.0 * m.auc, 100.0 * m.pauc);
    }
    println!(
        "Average       AUC {:6.2}  pAUC {:6.2}   ({:.0?}, config {})",
        100.0 * result.overall_auc,
        100.0 * result.overall_pauc,
        start.elapsed(),
        &pipeline.config_hash()[..12]
    );
    Ok(())
}
