//! Pretrains a small predictive autoencoder on the normal clips of one
//! synthetic machine type and compares frame-level scores of normal and
//! anomalous test clips.

use geco_asd::data::{generate_synthetic, Label, Split, SynthSpec};
use geco_asd::features::{log_mel, FeatureConfig};
use geco_asd::metrics::auc;
use geco_asd::pae::{frame_anomaly_score, train_pae, PaeArch, PaeTrainConfig};

fn main() -> geco_asd::Result<()> {
    let features = FeatureConfig::default();
    let spec = SynthSpec {
        anomaly_strength: 0.3,
        ..SynthSpec::default()
    };
    let clips = generate_synthetic(&spec)?;
    let machine_type = clips[0].0.machine_type.clone();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (record, wave) in clips.iter().filter(|(r, _)| r.machine_type == machine_type) {
        let x = log_mel(wave, &features)?.values;
        match record.split {
            Split::Train => train.push(x),
            Split::Test => test.push((record.label, x)),
        }
    }

    let mut config = PaeTrainConfig::default().scaled(12);
    config.batch_size = 64;
    let views: Vec<_> = train.iter().map(|x| x.view()).collect();
    let (model, log) = train_pae(&views, machine_type.clone(), PaeArch::tiny(features.n_mels), &config, 0)?;
    for e in &log {
        println!("epoch {:>2}  lr {:.0e}  masked MSE {:.3}", e.epoch, e.lr, e.loss);
    }

    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (label, x) in &test {
        scores.push(frame_anomaly_score(&model, x.view())?);
        labels.push(*label == Label::Anomaly);
    }
    let mean = |anomalous: bool| {
        let v: Vec<f64> = scores.iter().zip(&labels).filter(|(_, &l)| l == anomalous).map(|(s, _)| *s).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    println!("{machine_type}: mean score normal {:.2}, anomalous {:.2}", mean(false), mean(true));
    println!("frame-score AUC {:.3}", auc(&scores, &labels)?);
    Ok(())
}
