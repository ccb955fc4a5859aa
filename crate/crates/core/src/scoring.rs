//! Clip scoring: cosine similarity to machine-ID centers, the PAE frame
//! score, and their weighted fusion.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ClipRecord, MachineType};
use crate::metrics::{auc, pauc};
use crate::{Error, Result};

/// One unit-norm center per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCenters {
    pub centers: Vec<Vec<f32>>,
    pub sample_count: Vec<usize>,
}

fn normalize(v: &[f64]) -> Option<Vec<f32>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm > 1e-6).then(|| v.iter().map(|x| (x / norm) as f32).collect())
}

/// `center[c]` is the normalised mean of the normalised embeddings of class
/// `c`. `embeddings` pairs a class index with an embedding.
pub fn compute_centers(embeddings: &[(usize, Vec<f32>)], n_classes: usize) -> Result<ClassCenters> {
    let dim = embeddings
        .first()
        .map(|(_, e)| e.len())
        .ok_or_else(|| Error::invalid("no embeddings to average"))?;
    let mut sums = vec![vec![0f64; dim]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (class, e) in embeddings {
        if *class >= n_classes {
            return Err(Error::invalid(format!("class {class} outside 0..{n_classes}")));
        }
        if e.len() != dim {
            return Err(Error::invalid("embeddings differ in dimension"));
        }
        let unit = normalize(&e.iter().map(|&v| v as f64).collect::<Vec<_>>())
            .ok_or_else(|| Error::invalid(format!("zero embedding in class {class}")))?;
        for (s, u) in sums[*class].iter_mut().zip(unit) {
            *s += u as f64;
        }
        counts[*class] += 1;
    }
    let mut centers = Vec::with_capacity(n_classes);
    for (c, sum) in sums.iter().enumerate() {
        if counts[c] == 0 {
            return Err(Error::invalid(format!("class {c} has no training clips")));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / counts[c] as f64).collect();
        centers.push(
            normalize(&mean).ok_or_else(|| Error::invalid(format!("class {c}: embeddings cancel to a zero mean")))?,
        );
    }
    Ok(ClassCenters {
        centers,
        sample_count: counts,
    })
}

impl ClassCenters {
    pub fn n_classes(&self) -> usize {
        self.centers.len()
    }

    /// Cosine between `embedding` and the center of `class`, clamped to
    /// `[-1, 1]`.
    pub fn cosine(&self, embedding: &[f32], class: usize) -> Result<f64> {
        let center = self
            .centers
            .get(class)
            .ok_or_else(|| Error::invalid(format!("unknown class {class}")))?;
        cosine(embedding, center)
    }

    /// Best cosine over a set of classes, for when the machine ID is unknown.
    pub fn max_cosine(&self, embedding: &[f32], classes: &[usize]) -> Result<f64> {
        classes
            .iter()
            .map(|&c| self.cosine(embedding, c))
            .try_fold(f64::NEG_INFINITY, |acc, v| Ok(acc.max(v?)))
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid("cosine of vectors with different lengths"));
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine with a zero vector"));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Which center a test clip is compared with.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterMode {
    /// The center of the clip's own machine ID (IDs are known at test time).
    #[default]
    LabeledId,
    /// The most similar center among all IDs of the clip's machine type.
    MaxSameType,
}

/// `mse + gamma * (1 - cos_simi)`, evaluated as `mse + (gamma - gamma * cos_simi)`
/// so decimal inputs such as `cos_simi = 0.9, gamma = 200` give exact results.
pub fn fuse(mse: f64, cos_simi: f64, gamma: f64) -> f64 {
    mse + (gamma - gamma * cos_simi)
}

pub const DEFAULT_GAMMA: f64 = 200.0;

/// Fusion weight: one global value or one per machine type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FusionConfig {
    Global { gamma: f64 },
    PerType { gamma: BTreeMap<String, f64>, fallback: f64 },
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig::Global { gamma: DEFAULT_GAMMA }
    }
}

impl FusionConfig {
    /// The per-type optima reported for the DCASE2020 development set.
    pub fn reference_per_type() -> Self {
        let gamma = [
            ("ToyCar", 125.0),
            ("ToyConveyor", 135.0),
            ("Fan", 495.0),
            ("Pump", 225.0),
            ("Slider", 110.0),
            ("Valve", 125.0),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        FusionConfig::PerType {
            gamma,
            fallback: DEFAULT_GAMMA,
        }
    }

    pub fn gamma_for(&self, machine_type: &MachineType) -> f64 {
        match self {
            FusionConfig::Global { gamma } => *gamma,
            FusionConfig::PerType { gamma, fallback } => {
                gamma.get(machine_type.as_str()).copied().unwrap_or(*fallback)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            FusionConfig::Global { gamma } => *gamma >= 0.0,
            FusionConfig::PerType { gamma, fallback } => *fallback >= 0.0 && gamma.values().all(|&g| g >= 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config("gamma must be non-negative".into()))
        }
    }
}

/// A scored test clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredClip {
    pub record: ClipRecord,
    pub mse: f64,
    pub cos_simi: f64,
    pub fused: f64,
}

impl ScoredClip {
    pub fn new(record: ClipRecord, mse: f64, cos_simi: f64, gamma: f64) -> Self {
        ScoredClip {
            record,
            mse,
            cos_simi,
            fused: fuse(mse, cos_simi, gamma),
        }
    }
}

/// `50, 55, ..., 500`.
pub fn default_gamma_grid() -> Vec<f64> {
    (10..=100).map(|k| 5.0 * k as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaChoice {
    pub machine_type: MachineType,
    pub gamma: f64,
    pub auc: f64,
    pub pauc: f64,
}

/// Per machine type, the grid value maximising the mean over IDs of
/// `(AUC + pAUC) / 2`; ties go to the smaller gamma.
pub fn grid_search_gamma(clips: &[ScoredClip], grid: &[f64], fpr_max: f64) -> Result<Vec<GammaChoice>> {
    if grid.is_empty() {
        return Err(Error::invalid("gamma grid is empty"));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut groups: BTreeMap<&MachineType, BTreeMap<u32, Vec<&ScoredClip>>> = BTreeMap::new();
    for c in clips {
        if c.record.label.is_known() {
            groups
                .entry(&c.record.machine_type)
                .or_default()
                .entry(c.record.machine_id)
                .or_default()
                .push(c);
        }
    }
    let mut out = Vec::new();
    for (machine_type, ids) in groups {
        let usable: Vec<(Vec<bool>, &Vec<&ScoredClip>)> = ids
            .values()
            .map(|cs| (cs.iter().map(|c| c.record.label.is_anomaly()).collect::<Vec<_>>(), cs))
            .filter(|(l, _)| l.iter().any(|&a| a) && l.iter().any(|&a| !a))
            .collect();
        if usable.is_empty() {
            log::warn!("{machine_type}: no ID with both classes, skipping gamma search");
            continue;
        }
        let mut best: Option<GammaChoice> = None;
        for &gamma in &sorted {
            let (mut a, mut p) = (0.0, 0.0);
            for (labels, cs) in &usable {
                let scores: Vec<f64> = cs.iter().map(|c| fuse(c.mse, c.cos_simi, gamma)).collect();
                a += auc(&scores, labels)?;
                p += pauc(&scores, labels, fpr_max)?;
            }
            let k = usable.len() as f64;
            let cand = GammaChoice {
                machine_type: machine_type.clone(),
                gamma,
                auc: a / k,
                pauc: p / k,
            };
            let better = match &best {
                None => true,
                Some(b) => cand.auc + cand.pauc > b.auc + b.pauc,
            };
            if better {
                best = Some(cand);
            }
        }
        out.extend(best);
    }
    Ok(out)
}

/// Writes `filename,anomaly_score` rows with six decimals.
pub fn write_score_csv(path: &Path, clips: &[&ScoredClip]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(["filename", "anomaly_score"])?;
    for c in clips {
        w.write_record([c.record.file_name(), format!("{:.6}", c.fused)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a score CSV back as `(filename, score)` pairs.
pub fn read_score_csv(path: &Path) -> Result<Vec<(String, f64)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let score = row
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                reason: format!("bad score row {row:?}"),
            })?;
        out.push((row.get(0).unwrap_or_default().to_string(), score));
    }
    Ok(out)
}

pub fn write_gamma_csv(path: &Path, choices: &[GammaChoice]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["machine_type", "gamma", "auc", "pauc"])?;
    for c in choices {
        w.write_record([
            c.machine_type.to_string(),
            format!("{}", c.gamma),
            format!("{:.6}", c.auc),
            format!("{:.6}", c.pauc),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
