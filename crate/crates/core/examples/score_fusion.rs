//! Fuses a frame-level and a clip-level score and grid-searches the fusion
//! weight per machine type. The scores are simulated: for `Pump` the MSE
//! carries the signal, for `Valve` the cosine similarity does.

use std::path::PathBuf;

use geco_asd::data::{ClipRecord, Label, MachineType, Split};
use geco_asd::scoring::{default_gamma_grid, fuse, grid_search_gamma, ScoredClip, DEFAULT_GAMMA};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> geco_asd::Result<()> {
    println!("fuse(0.5, 1.0, 200) = {}", fuse(0.5, 1.0, DEFAULT_GAMMA));
    println!("fuse(0.5, 0.9, 200) = {}", fuse(0.5, 0.9, DEFAULT_GAMMA));

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut clips = Vec::new();
    for (t, mse_signal) in [("Pump", true), ("Valve", false)] {
        for id in 0..2u32 {
            for i in 0..60 {
                let anomalous = i % 2 == 1;
                let shift = if anomalous { 1.0 } else { 0.0 };
                let mse = 8.0 + rng.random_range(0.0..2.0) + if mse_signal { 2.0 * shift } else { 0.0 };
                let cos = 0.995 - rng.random_range(0.0..0.01) - if mse_signal { 0.0 } else { 0.01 * shift };
                let record = ClipRecord {
                    path: PathBuf::from(format!("{t}/test/clip_{id}_{i}.wav")),
                    machine_type: MachineType::new(t),
                    machine_id: id,
                    split: Split::Test,
                    label: if anomalous { Label::Anomaly } else { Label::Normal },
                    class_index: id as usize,
                };
                clips.push(ScoredClip::new(record, mse, cos, DEFAULT_GAMMA));
            }
        }
    }
    for choice in grid_search_gamma(&clips, &default_gamma_grid(), 0.1)? {
        println!(
            "{:<6} gamma* {:>5}  AUC {:.3}  pAUC {:.3}",
            choice.machine_type, choice.gamma, choice.auc, choice.pauc
        );
    }
    Ok(())
}
