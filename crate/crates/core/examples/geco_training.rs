//! Trains the extractor with PAE reconstruction augmentation on the
//! synthetic data, then scores test clips by cosine similarity to their
//! machine-ID centers.

use std::collections::BTreeMap;

use geco_asd::data::{generate_synthetic, Label, MachineType, Split, SynthSpec};
use geco_asd::features::{log_mel, FeatureConfig};
use geco_asd::geco::{train_geco, GecoArch, GecoTrainConfig, TrainingClip};
use geco_asd::metrics::auc;
use geco_asd::pae::{train_pae, PaeArch, PaeModel, PaeTrainConfig};
use geco_asd::scoring::compute_centers;
use ndarray::Array2;

fn main() -> geco_asd::Result<()> {
    let features = FeatureConfig::default();
    let spec = SynthSpec {
        anomaly_strength: 0.3,
        ..SynthSpec::default()
    };
    let clips: Vec<_> = generate_synthetic(&spec)?
        .into_iter()
        .map(|(r, w)| Ok((r, log_mel(&w, &features)?.values)))
        .collect::<geco_asd::Result<_>>()?;
    let (train, test): (Vec<_>, Vec<_>) = clips.iter().partition(|(r, _)| r.split == Split::Train);

    let mut by_type: BTreeMap<MachineType, Vec<&Array2<f32>>> = BTreeMap::new();
    for (r, x) in &train {
        by_type.entry(r.machine_type.clone()).or_default().push(x);
    }
    let mut pae_config = PaeTrainConfig::default().scaled(6);
    pae_config.batch_size = 64;
    let mut paes: BTreeMap<MachineType, PaeModel> = BTreeMap::new();
    for (t, xs) in by_type {
        let views: Vec<_> = xs.iter().map(|x| x.view()).collect();
        let (model, _) = train_pae(&views, t.clone(), PaeArch::tiny(features.n_mels), &pae_config, 1)?;
        paes.insert(t, model);
    }

    let training: Vec<TrainingClip> = train
        .iter()
        .map(|(r, x)| TrainingClip {
            features: x.view(),
            class_index: r.class_index,
            machine_type: r.machine_type.clone(),
        })
        .collect();
    let config = GecoTrainConfig::default().scaled(12);
    let (model, log) = train_geco(&training, &paes, GecoArch::tiny(features.n_mels), &config, 0, None)?;
    for e in &log {
        println!(
            "epoch {:>2}  lr {:<5}  lambda {:>5.2}  CE {:.4}  BCE {:.4}  total {:.4}",
            e.epoch, e.lr, e.lambda, e.loss_ce, e.loss_con, e.loss_total
        );
    }

    let embedded = train
        .iter()
        .map(|(r, x)| Ok((r.class_index, model.embed_clip(x.view())?)))
        .collect::<geco_asd::Result<Vec<_>>>()?;
    let centers = compute_centers(&embedded, model.n_classes())?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (r, x) in &test {
        let cos = centers.cosine(&model.embed_clip(x.view())?, r.class_index)?;
        scores.push(1.0 - cos);
        labels.push(r.label == Label::Anomaly);
    }
    println!("cosine-score AUC over all test clips: {:.3}", auc(&scores, &labels)?);
    Ok(())
}
