//! Generates the synthetic machine-sound dataset and writes it in the
//! DCASE directory layout.
//!
//! cargo run --release --example synthetic_dataset -- [out_dir]

use std::collections::BTreeMap;

use geco_asd::data::{generate_synthetic, write_manifest, write_synthetic, AnomalyKind, SynthSpec};

fn main() -> geco_asd::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synthetic-data".into());
    let spec = SynthSpec {
        anomaly_kind: AnomalyKind::BroadbandBurst,
        ..SynthSpec::default()
    };
    let clips = generate_synthetic(&spec)?;
    let records = write_synthetic(out.as_ref(), &clips)?;
    write_manifest(&std::path::Path::new(&out).join("manifest.csv"), &records)?;

    let mut counts: BTreeMap<(String, u32, &str, &str), usize> = BTreeMap::new();
    for r in &records {
        *counts
            .entry((r.machine_type.to_string(), r.machine_id, r.split.as_str(), r.label.as_str()))
            .or_default() += 1;
    }
    for ((t, id, split, label), n) in counts {
        println!("{t:>8} id {id:02} {split:<5} {label:<7} {n:>3}");
    }
    let (_, wave) = &clips[0];
    println!(
        "{} clips of {:.1} s at {} Hz written to {out}/",
        records.len(),
        wave.duration_secs(),
        wave.sample_rate
    );
    Ok(())
}
