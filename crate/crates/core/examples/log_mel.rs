//! Log-Mel features of one synthetic clip, or of a WAV file given on the
//! command line.

use geco_asd::data::{generate_synthetic, load_waveform, SynthSpec};
use geco_asd::features::{log_mel, mel_center_frequencies, FeatureConfig};

fn main() -> geco_asd::Result<()> {
    let wave = match std::env::args().nth(1) {
        Some(path) => load_waveform(path.as_ref())?,
        None => generate_synthetic(&SynthSpec::default())?.swap_remove(0).1,
    };
    let config = FeatureConfig::default();
    let spec = log_mel(&wave, &config)?;
    println!("{} samples -> {} frames x {} mels", wave.len(), spec.n_frames(), spec.n_mels());

    // Mean level per band, coarsely.
    let centers = mel_center_frequencies(&config);
    let means = spec.values.mean_axis(ndarray::Axis(0)).expect("non-empty");
    for band in (0..spec.n_mels()).step_by(16) {
        let bar = "#".repeat(((means[band] + 100.0).max(0.0) / 2.0) as usize);
        println!("{:>7.0} Hz {:>7.1} dB {bar}", centers[band], means[band]);
    }
    Ok(())
}
