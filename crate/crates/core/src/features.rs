//! Log-Mel spectrogram extraction, random cropping and the on-disk feature
//! cache.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::checkpoint::stable_hash;
use crate::data::Waveform;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    /// Analysis window and FFT length in samples.
    pub win: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    /// Upper filterbank edge; Nyquist when absent.
    pub f_max: Option<f64>,
    /// Exponent applied to the magnitude spectrum (2 = power, 1 = magnitude).
    pub power: f64,
    /// Floor added inside the logarithm.
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: 16_000,
            win: 1024,
            hop: 512,
            n_mels: 128,
            f_min: 0.0,
            f_max: None,
            power: 2.0,
            log_floor: 1e-10,
        }
    }
}

impl FeatureConfig {
    pub fn hash(&self) -> String {
        stable_hash(self)
    }

    /// Number of frames produced for `len` samples (no padding).
    pub fn frame_count(&self, len: usize) -> Option<usize> {
        (len >= self.win).then(|| 1 + (len - self.win) / self.hop)
    }

    /// Minimum waveform length yielding `frames` frames.
    pub fn samples_for_frames(&self, frames: usize) -> usize {
        self.win + frames.saturating_sub(1) * self.hop
    }
}

/// A time x mel matrix of log energies, in decibels.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    /// `[n_frames, n_mels]`
    pub values: Array2<f32>,
    pub sample_rate: u32,
    pub hop: usize,
    pub win: usize,
}

impl LogMelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.values.ncols()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= MIN_LOG_HZ {
        min_log_mel + (hz / MIN_LOG_HZ).ln() / logstep
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        MIN_LOG_HZ * (logstep * (mel - min_log_mel)).exp()
    } else {
        F_SP * mel
    }
}

/// Slaney-style triangular filterbank with area normalisation,
/// `[n_mels, win / 2 + 1]`.
pub fn mel_filterbank(config: &FeatureConfig) -> Array2<f64> {
    let n_bins = config.win / 2 + 1;
    let sr = config.sample_rate as f64;
    let f_max = config.f_max.unwrap_or(sr / 2.0);
    let mel_lo = hz_to_mel(config.f_min);
    let mel_hi = hz_to_mel(f_max);
    let edges: Vec<f64> = (0..config.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (config.n_mels + 1) as f64))
        .collect();
    let bin_hz: Vec<f64> = (0..n_bins).map(|k| k as f64 * sr / config.win as f64).collect();
    let mut bank = Array2::zeros((config.n_mels, n_bins));
    for m in 0..config.n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let norm = 2.0 / (hi - lo);
        for (k, &f) in bin_hz.iter().enumerate() {
            let rising = (f - lo) / (center - lo);
            let falling = (hi - f) / (hi - center);
            let w = rising.min(falling).max(0.0);
            bank[[m, k]] = w * norm;
        }
    }
    bank
}

/// Center frequencies (Hz) of the mel filters.
pub fn mel_center_frequencies(config: &FeatureConfig) -> Vec<f64> {
    let sr = config.sample_rate as f64;
    let f_max = config.f_max.unwrap_or(sr / 2.0);
    let mel_lo = hz_to_mel(config.f_min);
    let mel_hi = hz_to_mel(f_max);
    (1..=config.n_mels)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (config.n_mels + 1) as f64))
        .collect()
}

/// Reusable extractor holding the FFT plan, window and filterbank.
pub struct LogMelExtractor {
    config: FeatureConfig,
    window: Vec<f64>,
    filterbank: Array2<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl LogMelExtractor {
    pub fn new(config: FeatureConfig) -> Result<Self> {
        if config.win == 0 || config.hop == 0 || config.n_mels == 0 {
            return Err(Error::Config("win, hop and n_mels must be positive".into()));
        }
        if !(config.log_floor > 0.0) {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        let n = config.win;
        // Periodic Hann window.
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let filterbank = mel_filterbank(&config);
        let fft = FftPlanner::new().plan_fft_forward(n);
        Ok(LogMelExtractor {
            config,
            window,
            filterbank,
            fft,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn extract(&self, wave: &Waveform) -> Result<LogMelSpectrogram> {
        let cfg = &self.config;
        let n_frames = cfg.frame_count(wave.len()).ok_or(Error::TooShort {
            len: wave.len(),
            min: cfg.win,
        })?;
        let n_bins = cfg.win / 2 + 1;
        let mut values = Array2::<f32>::zeros((n_frames, cfg.n_mels));
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.win];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut spectrum = vec![0.0f64; n_bins];
        for t in 0..n_frames {
            let frame = &wave.samples[t * cfg.hop..t * cfg.hop + cfg.win];
            for ((b, &x), &w) in buf.iter_mut().zip(frame).zip(&self.window) {
                *b = Complex::new(x as f64 * w, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in spectrum.iter_mut().zip(&buf) {
                let mag = c.norm();
                *p = if cfg.power == 2.0 { mag * mag } else { mag.powf(cfg.power) };
            }
            for m in 0..cfg.n_mels {
                let energy: f64 = self
                    .filterbank
                    .row(m)
                    .iter()
                    .zip(&spectrum)
                    .map(|(w, p)| w * p)
                    .sum();
                values[[t, m]] = (10.0 * (energy + cfg.log_floor).log10()) as f32;
            }
        }
        Ok(LogMelSpectrogram {
            values,
            sample_rate: wave.sample_rate,
            hop: cfg.hop,
            win: cfg.win,
        })
    }
}

/// One-shot log-Mel extraction.
pub fn log_mel(wave: &Waveform, config: &FeatureConfig) -> Result<LogMelSpectrogram> {
    LogMelExtractor::new(config.clone())?.extract(wave)
}

/// Draws a crop start uniformly from `0..=n_frames - length`.
pub fn crop_start<R: Rng + ?Sized>(n_frames: usize, length: usize, rng: &mut R) -> Result<usize> {
    if n_frames < length {
        return Err(Error::invalid(format!(
            "spectrogram has {n_frames} frames, crop needs {length}"
        )));
    }
    Ok(rng.random_range(0..=n_frames - length))
}

/// Random contiguous crop of `length` frames.
pub fn crop_frames<R: Rng + ?Sized>(
    spec: &LogMelSpectrogram,
    length: usize,
    rng: &mut R,
) -> Result<LogMelSpectrogram> {
    let start = crop_start(spec.n_frames(), length, rng)?;
    Ok(LogMelSpectrogram {
        values: spec.values.slice(s![start..start + length, ..]).to_owned(),
        ..spec.clone()
    })
}

/// Global mean / standard deviation of training features, applied before
/// the convolutional extractor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: f32,
    pub std: f32,
}

impl FeatureStats {
    pub fn identity() -> Self {
        FeatureStats { mean: 0.0, std: 1.0 }
    }

    pub fn from_spectrograms<'a>(specs: impl IntoIterator<Item = ArrayView2<'a, f32>>) -> Result<Self> {
        let (mut n, mut sum, mut sum_sq) = (0usize, 0.0f64, 0.0f64);
        for spec in specs {
            for &v in spec.iter() {
                n += 1;
                sum += v as f64;
                sum_sq += (v as f64) * (v as f64);
            }
        }
        if n == 0 {
            return Err(Error::invalid("no training features for normalisation"));
        }
        let mean = sum / n as f64;
        let var = (sum_sq / n as f64 - mean * mean).max(0.0);
        Ok(FeatureStats {
            mean: mean as f32,
            std: (var.sqrt() as f32).max(1e-6),
        })
    }

    pub fn apply(&self, values: &mut [f32]) {
        let inv = 1.0 / self.std;
        for v in values {
            *v = (*v - self.mean) * inv;
        }
    }
}

const CACHE_MAGIC: &[u8; 4] = b"GLMS";
const CACHE_VERSION: u32 = 1;

/// Writes a feature matrix with a header carrying its dimensions and the
/// hash of the feature configuration that produced it.
pub fn write_feature_cache(path: &Path, values: &Array2<f32>, config_hash: &str) -> Result<()> {
    if config_hash.len() != 64 {
        return Err(Error::invalid("config hash must be 64 hex characters"));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut bytes = Vec::with_capacity(80 + values.len() * 4);
    bytes.extend_from_slice(CACHE_MAGIC);
    bytes.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(values.nrows() as u32).to_le_bytes());
    bytes.extend_from_slice(&(values.ncols() as u32).to_le_bytes());
    bytes.extend_from_slice(config_hash.as_bytes());
    for v in values.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Reads a cached feature matrix; `Ok(None)` when the cache was produced by
/// a different feature configuration.
pub fn read_feature_cache(path: &Path, expected_hash: &str) -> Result<Option<Array2<f32>>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: &str| Error::Parse {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 80 || &bytes[..4] != CACHE_MAGIC {
        return Err(corrupt("not a feature cache file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    if word(4) != CACHE_VERSION {
        return Err(corrupt("unsupported feature cache version"));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    if &bytes[16..80] != expected_hash.as_bytes() {
        return Ok(None);
    }
    let data = &bytes[80..];
    if data.len() != rows * cols * 4 {
        return Err(corrupt("feature cache payload has the wrong length"));
    }
    let values = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Array2::from_shape_vec((rows, cols), values)
        .map(Some)
        .map_err(|e| corrupt(&e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tone(freq: f64, len: usize) -> Waveform {
        let samples = (0..len)
            .map(|n| (0.5 * (2.0 * std::f64::consts::PI * freq * n as f64 / 16_000.0).sin()) as f32)
            .collect();
        Waveform::new(samples, 16_000).unwrap()
    }

    #[test]
    fn ten_second_clip_has_311_frames() {
        let cfg = FeatureConfig::default();
        // Direct framing count: every start t*hop whose window fits.
        let direct = (0..).take_while(|t| t * cfg.hop + cfg.win <= 160_000).count();
        assert_eq!(direct, 311);
        let wave = Waveform::new(vec![0.0; 160_000], 16_000).unwrap();
        let spec = log_mel(&wave, &cfg).unwrap();
        assert_eq!(spec.n_frames(), 311);
        assert_eq!(spec.n_mels(), 128);
    }

    #[test]
    fn silence_hits_the_floor() {
        let cfg = FeatureConfig::default();
        let wave = Waveform::new(vec![0.0; 4096], 16_000).unwrap();
        let spec = log_mel(&wave, &cfg).unwrap();
        let floor = (10.0 * cfg.log_floor.log10()) as f32;
        assert!(spec.values.iter().all(|&v| v == floor));
    }

    #[test]
    fn too_short_waveform_names_minimum() {
        let wave = Waveform::new(vec![0.0; 1000], 16_000).unwrap();
        match log_mel(&wave, &FeatureConfig::default()) {
            Err(Error::TooShort { len: 1000, min: 1024 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn one_khz_tone_peaks_in_the_nearest_filter() {
        let cfg = FeatureConfig::default();
        let centers = mel_center_frequencies(&cfg);
        let expected = centers
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 1000.0).abs().partial_cmp(&(b.1 - 1000.0).abs()).unwrap())
            .unwrap()
            .0;
        let spec = log_mel(&tone(1000.0, 16_000), &cfg).unwrap();
        for row in spec.values.rows() {
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert!(argmax.abs_diff(expected) <= 1, "argmax {argmax} vs {expected}");
        }
        let first_argmax: Vec<_> = spec
            .values
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            })
            .collect();
        assert!(first_argmax.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn filterbank_rows_are_contiguous_nonnegative_bands() {
        let bank = mel_filterbank(&FeatureConfig::default());
        for row in bank.rows() {
            assert!(row.iter().all(|&w| w >= 0.0));
            let nz: Vec<usize> = row
                .iter()
                .enumerate()
                .filter(|(_, &w)| w > 0.0)
                .map(|(i, _)| i)
                .collect();
            assert!(!nz.is_empty(), "empty mel filter");
            assert_eq!(nz.last().unwrap() - nz[0] + 1, nz.len());
        }
    }

    #[test]
    fn mel_scale_round_trips() {
        for hz in [0.0, 100.0, 999.0, 1000.0, 4000.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
    }

    #[test]
    fn crop_is_identity_when_lengths_match() {
        let spec = LogMelSpectrogram {
            values: Array2::from_shape_fn((65, 4), |(t, m)| (t * 4 + m) as f32),
            sample_rate: 16_000,
            hop: 512,
            win: 1024,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(crop_frames(&spec, 65, &mut rng).unwrap(), spec);
        assert!(crop_frames(&spec, 66, &mut rng).is_err());
    }

    #[test]
    fn crop_has_requested_length_and_is_seeded() {
        let spec = LogMelSpectrogram {
            values: Array2::from_shape_fn((311, 3), |(t, _)| t as f32),
            sample_rate: 16_000,
            hop: 512,
            win: 1024,
        };
        let a = crop_frames(&spec, 65, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = crop_frames(&spec, 65, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.n_frames(), 65);
        assert_eq!(a, b);
        let start = a.values[[0, 0]] as usize;
        assert_eq!(a.values[[64, 0]] as usize, start + 64);
    }

    #[test]
    fn cache_round_trip_and_invalidation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.lmel");
        let values = Array2::from_shape_fn((7, 5), |(t, m)| t as f32 - m as f32 * 0.5);
        let hash = FeatureConfig::default().hash();
        write_feature_cache(&path, &values, &hash).unwrap();
        assert_eq!(read_feature_cache(&path, &hash).unwrap(), Some(values));
        let other = FeatureConfig {
            n_mels: 64,
            ..FeatureConfig::default()
        }
        .hash();
        assert_eq!(read_feature_cache(&path, &other).unwrap(), None);
    }

    #[test]
    fn stats_normalise_to_zero_mean_unit_variance() {
        let a = Array2::from_shape_fn((10, 4), |(t, m)| (t * 3 + m) as f32);
        let stats = FeatureStats::from_spectrograms([a.view()]).unwrap();
        let mut v: Vec<f32> = a.iter().copied().collect();
        stats.apply(&mut v);
        let mean: f32 = v.iter().sum::<f32>() / v.len() as f32;
        let var: f32 = v.iter().map(|x| x * x).sum::<f32>() / v.len() as f32;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn extraction_is_deterministic_and_energy_monotone(
            seed in 0u64..1000,
            gain in 1.5f32..8.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples: Vec<f32> = (0..3000).map(|_| rng.random_range(-0.5f32..0.5)).collect();
            let cfg = FeatureConfig { n_mels: 32, ..FeatureConfig::default() };
            let wave = Waveform::new(samples.clone(), 16_000).unwrap();
            let loud = Waveform::new(samples.iter().map(|s| s * gain).collect(), 16_000).unwrap();
            let a = log_mel(&wave, &cfg).unwrap();
            let b = log_mel(&wave, &cfg).unwrap();
            prop_assert_eq!(&a, &b);
            let c = log_mel(&loud, &cfg).unwrap();
            for (q, l) in a.values.iter().zip(c.values.iter()) {
                prop_assert!(l >= q);
            }
        }
    }
}
