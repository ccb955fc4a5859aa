//! Dataset ingestion: the DCASE2020 Task 2 development layout and a
//! deterministic synthetic stand-in with the same schema.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// The six machine types of the DCASE2020 Task 2 development set, in their
/// canonical spelling.
pub const DCASE_MACHINE_TYPES: [&str; 6] = ["ToyCar", "ToyConveyor", "Fan", "Pump", "Slider", "Valve"];

/// Machine type name. DCASE types are canonicalised (`fan` -> `Fan`); any
/// other name is kept verbatim, which is how synthetic types are carried.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MachineType(String);

impl MachineType {
    pub fn new(name: &str) -> Self {
        let canonical = DCASE_MACHINE_TYPES
            .iter()
            .find(|known| known.eq_ignore_ascii_case(name))
            .map(|s| s.to_string())
            .unwrap_or_else(|| name.to_string());
        MachineType(canonical)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_dcase(&self) -> bool {
        DCASE_MACHINE_TYPES.contains(&self.0.as_str())
    }
}

impl fmt::Display for MachineType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomaly,
    Unknown,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Anomaly => "anomaly",
            Label::Unknown => "unknown",
        }
    }

    pub fn is_known(self) -> bool {
        self != Label::Unknown
    }

    pub fn is_anomaly(self) -> bool {
        self == Label::Anomaly
    }
}

/// One audio clip of the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub path: PathBuf,
    pub machine_type: MachineType,
    pub machine_id: u32,
    pub split: Split,
    pub label: Label,
    pub class_index: usize,
}

impl ClipRecord {
    /// File name without directories, as used in score files.
    pub fn file_name(&self) -> String {
        self.path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

/// Mono audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("waveform has no samples"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform samples".into()));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Parsed form of a DCASE file name `{label}_id_{NN}_{index}.wav`.
fn parse_file_name(path: &Path, split: Split) -> Result<(Label, u32)> {
    let err = |reason: &str| Error::Parse {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let name = path
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| err("file name is not valid UTF-8"))?;
    let stem = name
        .strip_suffix(".wav")
        .ok_or_else(|| err("expected a .wav file"))?;
    let parts: Vec<&str> = stem.split('_').collect();
    // Evaluation-style test names drop the label: `id_NN_index`.
    let (label, rest) = match parts.as_slice() {
        ["normal", rest @ ..] => (Label::Normal, rest),
        ["anomaly", rest @ ..] => (Label::Anomaly, rest),
        rest @ ["id", ..] if split == Split::Test => (Label::Unknown, rest),
        _ => return Err(err("expected `{normal|anomaly}_id_{NN}_{index}.wav`")),
    };
    let id = match rest {
        ["id", id, index]
            if !id.is_empty()
                && id.bytes().all(|b| b.is_ascii_digit())
                && !index.is_empty()
                && index.bytes().all(|b| b.is_ascii_digit()) =>
        {
            id.parse::<u32>().map_err(|_| err("machine id out of range"))?
        }
        _ => return Err(err("expected `{normal|anomaly}_id_{NN}_{index}.wav`")),
    };
    if split == Split::Train && label != Label::Normal {
        return Err(err("training split may only contain normal clips"));
    }
    Ok((label, id))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort();
    Ok(entries)
}

/// Assigns `class_index` by sorting the distinct (machine_type, machine_id)
/// pairs lexicographically.
pub fn assign_class_indices(records: &mut [ClipRecord]) {
    let pairs: BTreeSet<(MachineType, u32)> = records
        .iter()
        .map(|r| (r.machine_type.clone(), r.machine_id))
        .collect();
    let pairs: Vec<_> = pairs.into_iter().collect();
    for record in records.iter_mut() {
        let key = (record.machine_type.clone(), record.machine_id);
        record.class_index = pairs.binary_search(&key).expect("pair collected above");
    }
}

/// Number of distinct classes among `records`.
pub fn class_count(records: &[ClipRecord]) -> usize {
    records
        .iter()
        .map(|r| r.class_index + 1)
        .max()
        .unwrap_or(0)
}

/// Scans a DCASE-style tree: `root/<machine_type>/{train,test}/*.wav`.
///
/// Files without a `.wav` extension are ignored; every `.wav` must follow the
/// naming convention or the scan fails with the offending path.
pub fn scan_dcase(root: &Path) -> Result<Vec<ClipRecord>> {
    if !root.is_dir() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    let mut records = Vec::new();
    for type_dir in sorted_entries(root)? {
        if !type_dir.is_dir() {
            continue;
        }
        let type_name = type_dir
            .file_name()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Parse {
                path: type_dir.clone(),
                reason: "directory name is not valid UTF-8".into(),
            })?;
        let machine_type = MachineType::new(type_name);
        let mut found_split = false;
        for split in [Split::Train, Split::Test] {
            let split_dir = type_dir.join(split.as_str());
            if !split_dir.is_dir() {
                continue;
            }
            found_split = true;
            for file in sorted_entries(&split_dir)? {
                let is_wav = file
                    .extension()
                    .map(|e| e.eq_ignore_ascii_case("wav"))
                    .unwrap_or(false);
                if !file.is_file() || !is_wav {
                    continue;
                }
                let (label, machine_id) = parse_file_name(&file, split)?;
                records.push(ClipRecord {
                    path: file,
                    machine_type: machine_type.clone(),
                    machine_id,
                    split,
                    label,
                    class_index: 0,
                });
            }
        }
        if !found_split {
            return Err(Error::Parse {
                path: type_dir,
                reason: "machine type directory has neither train/ nor test/".into(),
            });
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    assign_class_indices(&mut records);
    Ok(records)
}

/// Reads a PCM or float WAV file and downmixes it to mono.
pub fn load_waveform(path: &Path) -> Result<Waveform> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err)?
        }
    };
    if interleaved.len() % channels != 0 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            reason: "sample count is not a multiple of the channel count".into(),
        });
    }
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect()
    };
    Waveform::new(samples, spec.sample_rate).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes a mono 32-bit float WAV.
pub fn write_waveform(path: &Path, wave: &Waveform) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &wave.samples {
        writer.write_sample(s).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    path: String,
    machine_type: String,
    machine_id: u32,
    split: Split,
    label: Label,
    class_index: usize,
}

/// Writes the dataset manifest CSV
/// (`path,machine_type,machine_id,split,label,class_index`).
pub fn write_manifest(path: &Path, records: &[ClipRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for r in records {
        writer.serialize(ManifestRow {
            path: r.path.to_string_lossy().into_owned(),
            machine_type: r.machine_type.to_string(),
            machine_id: r.machine_id,
            split: r.split,
            label: r.label,
            class_index: r.class_index,
        })?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ClipRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader
        .deserialize::<ManifestRow>()
        .map(|row| {
            let row = row?;
            Ok(ClipRecord {
                path: PathBuf::from(row.path),
                machine_type: MachineType::new(&row.machine_type),
                machine_id: row.machine_id,
                split: row.split,
                label: row.label,
                class_index: row.class_index,
            })
        })
        .collect()
}

/// Perturbation applied to synthetic anomalous test clips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// Partials shifted upward by 5-12 %.
    HarmonicShift,
    /// Short bursts of broadband noise.
    BroadbandBurst,
    /// Tone stack intermittently switched off.
    ToneDropout,
}

/// Recipe for the synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub clips_per_class: usize,
    /// Test clips per class; half normal, half anomalous.
    pub test_clips_per_class: usize,
    pub clip_seconds: f64,
    pub sample_rate: u32,
    /// Machine IDs grouped under one synthetic machine type.
    pub ids_per_type: usize,
    pub anomaly_kind: AnomalyKind,
    /// Scales the perturbation: shift size, dropout length, burst level.
    pub anomaly_strength: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_classes: 4,
            clips_per_class: 50,
            test_clips_per_class: 20,
            clip_seconds: 4.0,
            sample_rate: 16_000,
            ids_per_type: 2,
            anomaly_kind: AnomalyKind::HarmonicShift,
            anomaly_strength: 1.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    fn machine_of(&self, class: usize) -> (MachineType, u32) {
        let type_index = class / self.ids_per_type;
        let letter = (b'A' + (type_index % 26) as u8) as char;
        let name = if type_index < 26 {
            format!("Synth{letter}")
        } else {
            format!("Synth{letter}{}", type_index / 26)
        };
        (MachineType::new(&name), (class % self.ids_per_type) as u32)
    }
}

/// Per-class sound recipe: a tone stack with a slow amplitude modulation on
/// top of low-passed noise.
struct ClassVoice {
    f0: f64,
    partial_gains: Vec<f64>,
    am_rate: f64,
    am_depth: f64,
    noise_gain: f64,
    noise_pole: f64,
}

impl ClassVoice {
    fn for_class(class: usize) -> Self {
        // Fundamentals on a ratio grid that keeps partials of different
        // classes apart; every block of six is offset slightly.
        let f0 = 140.0 * 1.37f64.powi((class % 6) as i32) * (1.0 + 0.045 * (class / 6) as f64);
        let tilt = 0.6 + 0.35 * (class % 3) as f64;
        let partial_gains = (1..=6)
            .map(|k| {
                let accent = if k == 2 + class % 4 { 1.6 } else { 1.0 };
                accent / (k as f64).powf(tilt)
            })
            .collect();
        ClassVoice {
            f0,
            partial_gains,
            am_rate: 1.5 + 0.7 * class as f64,
            am_depth: 0.25 + 0.05 * (class % 4) as f64,
            noise_gain: 0.04 + 0.01 * (class % 3) as f64,
            noise_pole: 0.5 + 0.1 * (class % 4) as f64,
        }
    }
}

fn clip_rng(seed: u64, class: usize, split: Split, index: usize) -> ChaCha8Rng {
    let split_tag = match split {
        Split::Train => 0u64,
        Split::Test => 1u64,
    };
    let mixed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((class as u64) << 40)
        .wrapping_add(split_tag << 32)
        .wrapping_add(index as u64);
    ChaCha8Rng::seed_from_u64(mixed)
}

fn synth_clip(
    voice: &ClassVoice,
    n_samples: usize,
    sample_rate: u32,
    anomaly: Option<AnomalyKind>,
    strength: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let sr = sample_rate as f64;
    let f0 = voice.f0 * (1.0 + rng.random_range(-0.01..0.01));
    let level = 1.0 + rng.random_range(-0.1..0.1);
    let am_rate = voice.am_rate * (1.0 + rng.random_range(-0.05..0.05));
    let am_phase = rng.random_range(0.0..2.0 * PI);
    let phases: Vec<f64> = voice
        .partial_gains
        .iter()
        .map(|_| rng.random_range(0.0..2.0 * PI))
        .collect();
    let shift = match anomaly {
        Some(AnomalyKind::HarmonicShift) => 1.0 + strength * rng.random_range(0.05..0.12),
        _ => 1.0,
    };

    // Gate applied to the tone stack (dropout) and additive bursts.
    let mut tone_gate = vec![1.0f64; n_samples];
    let mut burst_gate = vec![0.0f64; n_samples];
    match anomaly {
        Some(AnomalyKind::ToneDropout) => {
            for _ in 0..rng.random_range(3..6) {
                let len = (strength * rng.random_range(0.1..0.3) * sr) as usize;
                let start = rng.random_range(0..n_samples.saturating_sub(len).max(1));
                tone_gate[start..(start + len).min(n_samples)].fill(0.0);
            }
        }
        Some(AnomalyKind::BroadbandBurst) => {
            for _ in 0..rng.random_range(3..7) {
                let len = (rng.random_range(0.05..0.15) * sr) as usize;
                let start = rng.random_range(0..n_samples.saturating_sub(len).max(1));
                burst_gate[start..(start + len).min(n_samples)].fill(0.5 * strength);
            }
        }
        _ => {}
    }

    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let nyquist = sr / 2.0;
    let mut lp_state = 0.0f64;
    let mut out = Vec::with_capacity(n_samples);
    for n in 0..n_samples {
        let t = n as f64 / sr;
        let am = 1.0 + voice.am_depth * (2.0 * PI * am_rate * t + am_phase).sin();
        let mut tone = 0.0;
        for (k, (&gain, &phase)) in voice.partial_gains.iter().zip(&phases).enumerate() {
            let freq = f0 * (k + 1) as f64 * shift;
            if freq < nyquist {
                tone += gain * (2.0 * PI * freq * t + phase).sin();
            }
        }
        let white = gauss.sample(rng);
        lp_state = voice.noise_pole * lp_state + (1.0 - voice.noise_pole) * white;
        let sample = 0.15 * level * am * tone * tone_gate[n]
            + voice.noise_gain * lp_state
            + burst_gate[n] * white;
        out.push(sample as f32);
    }
    out
}

/// Generates the synthetic dataset. Records carry relative paths in the
/// DCASE layout (`<type>/<split>/<label>_id_NN_XXXXXXXX.wav`) so the result
/// can be written to disk and re-read with [`scan_dcase`].
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<(ClipRecord, Waveform)>> {
    if spec.n_classes < 2 {
        return Err(Error::invalid("synthetic dataset needs at least 2 classes"));
    }
    if !(spec.anomaly_strength > 0.0 && spec.anomaly_strength.is_finite()) {
        return Err(Error::invalid("anomaly_strength must be positive"));
    }
    if spec.ids_per_type == 0 {
        return Err(Error::invalid("ids_per_type must be positive"));
    }
    let n_samples = (spec.clip_seconds * spec.sample_rate as f64).round() as usize;
    if n_samples == 0 {
        return Err(Error::invalid("clip_seconds too small"));
    }
    let mut out = Vec::new();
    for class in 0..spec.n_classes {
        let voice = ClassVoice::for_class(class);
        let (machine_type, machine_id) = spec.machine_of(class);
        let mut push = |split: Split, label: Label, index: usize, samples: Vec<f32>| -> Result<()> {
            let path = PathBuf::from(machine_type.as_str())
                .join(split.as_str())
                .join(format!("{}_id_{:02}_{:08}.wav", label.as_str(), machine_id, index));
            out.push((
                ClipRecord {
                    path,
                    machine_type: machine_type.clone(),
                    machine_id,
                    split,
                    label,
                    class_index: class,
                },
                Waveform::new(samples, spec.sample_rate)?,
            ));
            Ok(())
        };
        for index in 0..spec.clips_per_class {
            let mut rng = clip_rng(spec.seed, class, Split::Train, index);
            push(
                Split::Train,
                Label::Normal,
                index,
                synth_clip(&voice, n_samples, spec.sample_rate, None, 0.0, &mut rng),
            )?;
        }
        let n_normal_test = spec.test_clips_per_class / 2;
        for index in 0..spec.test_clips_per_class {
            let mut rng = clip_rng(spec.seed, class, Split::Test, index);
            let (label, anomaly) = if index < n_normal_test {
                (Label::Normal, None)
            } else {
                (Label::Anomaly, Some(spec.anomaly_kind))
            };
            push(
                Split::Test,
                label,
                index,
                synth_clip(&voice, n_samples, spec.sample_rate, anomaly, spec.anomaly_strength, &mut rng),
            )?;
        }
    }
    // Class indices must follow the same lexicographic rule as scan_dcase.
    let mut records: Vec<ClipRecord> = out.iter().map(|(r, _)| r.clone()).collect();
    assign_class_indices(&mut records);
    for ((record, _), reassigned) in out.iter_mut().zip(records) {
        record.class_index = reassigned.class_index;
    }
    Ok(out)
}

/// Writes a synthetic dataset under `root` in the DCASE layout and returns
/// the records with absolute paths.
pub fn write_synthetic(root: &Path, clips: &[(ClipRecord, Waveform)]) -> Result<Vec<ClipRecord>> {
    clips
        .iter()
        .map(|(record, wave)| {
            let path = root.join(&record.path);
            write_waveform(&path, wave)?;
            Ok(ClipRecord {
                path,
                ..record.clone()
            })
        })
        .collect()
}
