//! On-disk pipeline: configuration, stages, and their artifacts.
//!
//! Every stage writes under the run's output directory and records a
//! `stages/<stage>.json` marker carrying the config hash. A stage refuses to
//! run when a prerequisite marker is missing, and refuses inputs stamped
//! with a different hash.
//!
//! Layout:
//!
//! ```text
//! <out>/config.toml              resolved configuration
//! <out>/manifest.csv             all clips
//! <out>/data/...                 synthetic WAVs (synthetic source only)
//! <out>/features/<type>/<split>/<clip>.glms
//! <out>/models/<type>/pae.safetensors
//! <out>/models/geco.safetensors
//! <out>/models/centers.json
//! <out>/logs/pae_<type>.csv, logs/geco.csv
//! <out>/scores/scored_clips.csv  mse, cosine and fused score per test clip
//! <out>/scores/anomaly_score_<type>_id_<NN>.csv
//! <out>/results/metrics.csv, metrics.json, gamma_search.csv, ablation_lambda.csv
//! <out>/plots/*.svg
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::stable_hash;
use crate::data::{
    generate_synthetic, load_waveform, read_manifest, scan_dcase, write_manifest, write_synthetic, ClipRecord,
    MachineType, Split, SynthSpec,
};
use crate::features::{read_feature_cache, write_feature_cache, FeatureConfig, LogMelExtractor};
use crate::geco::{train_geco, GecoArch, GecoEpoch, GecoModel, GecoTrainConfig, TrainingClip};
use crate::metrics::{evaluate, roc_curve, write_metrics_csv, EvalResult, LabeledScore, DEFAULT_FPR_MAX};
use crate::pae::{frame_anomaly_score, train_pae, PaeArch, PaeEpoch, PaeModel, PaeTrainConfig};
use crate::plot::{plot_losses, plot_roc, Series};
use crate::schedule::{LambdaSchedule, RampSchedule};
use crate::scoring::{
    compute_centers, grid_search_gamma, write_gamma_csv, write_score_csv, CenterMode, ClassCenters, FusionConfig,
    ScoredClip,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// DCASE development-set root; the synthetic generator is used when
    /// absent.
    pub dcase_root: Option<PathBuf>,
    pub synth: SynthSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dcase_root: None,
            synth: SynthSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PaeConfig {
    pub arch: PaeArch,
    pub train: PaeTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct GecoConfig {
    pub arch: GecoArch,
    pub train: GecoTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub fpr_max: f64,
    pub gamma_start: f64,
    pub gamma_stop: f64,
    pub gamma_step: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            fpr_max: DEFAULT_FPR_MAX,
            gamma_start: 50.0,
            gamma_stop: 500.0,
            gamma_step: 5.0,
        }
    }
}

impl EvalConfig {
    pub fn gamma_grid(&self) -> Result<Vec<f64>> {
        if !(self.gamma_step > 0.0) || self.gamma_stop < self.gamma_start {
            return Err(Error::Config("gamma grid needs step > 0 and stop >= start".into()));
        }
        let n = ((self.gamma_stop - self.gamma_start) / self.gamma_step + 1e-9).floor() as usize;
        Ok((0..=n).map(|k| self.gamma_start + k as f64 * self.gamma_step).collect())
    }
}

/// Everything a run depends on. Serialised to `config.toml` in the output
/// directory; its hash stamps every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for feature extraction and scoring; 0 = all cores.
    pub workers: usize,
    pub out: PathBuf,
    /// Center used for the clip-level cosine score.
    pub centers: CenterMode,
    pub data: DataConfig,
    pub features: FeatureConfig,
    pub pae: PaeConfig,
    pub geco: GecoConfig,
    pub fusion: FusionConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 0,
            out: PathBuf::from("geco-run"),
            centers: CenterMode::default(),
            data: DataConfig::default(),
            features: FeatureConfig::default(),
            pae: PaeConfig::default(),
            geco: GecoConfig::default(),
            fusion: FusionConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Desk-scale configuration: four synthetic classes, one-block width-32
    /// PAE trained 12 epochs, small extractor trained 24 epochs with the
    /// same schedule proportions as the full run.
    pub fn tiny_synthetic() -> Self {
        let features = FeatureConfig::default();
        let n_mels = features.n_mels;
        let mut pae_train = PaeTrainConfig::default().scaled(12);
        pae_train.batch_size = 64;
        RunConfig {
            // Subtle anomalies and a larger test split keep the metrics
            // off the 100% ceiling, so configurations can be told apart.
            data: DataConfig {
                dcase_root: None,
                synth: SynthSpec {
                    test_clips_per_class: 100,
                    anomaly_strength: 0.3,
                    ..SynthSpec::default()
                },
            },
            features,
            pae: PaeConfig {
                arch: PaeArch::tiny(n_mels),
                train: pae_train,
            },
            geco: GecoConfig {
                arch: GecoArch::tiny(n_mels),
                train: GecoTrainConfig::default().scaled(24),
            },
            ..RunConfig::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hash of everything that affects results (`out` and `workers` do
    /// not).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        c.workers = 0;
        stable_hash(&c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pae.arch.n_mels != self.features.n_mels || self.geco.arch.n_mels != self.features.n_mels {
            return Err(Error::Config("model n_mels must match features.n_mels".into()));
        }
        self.pae.train.lr.validate()?;
        self.geco.train.validate()?;
        self.fusion.validate()?;
        self.eval.gamma_grid()?;
        if !(self.eval.fpr_max > 0.0 && self.eval.fpr_max <= 1.0) {
            return Err(Error::Config("eval.fpr_max must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

/// Resolves defaults < file < flags, logging where each top-level value
/// came from.
pub fn resolve_config(file: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut config = match file {
        Some(path) => {
            log::info!("config: loading {}", path.display());
            RunConfig::from_file(path)?
        }
        None => {
            log::info!("config: no file given, using defaults");
            RunConfig::default()
        }
    };
    if let Some(seed) = overrides.seed {
        log::info!("config: seed = {seed} (flag)");
        config.seed = seed;
    }
    if let Some(workers) = overrides.workers {
        log::info!("config: workers = {workers} (flag)");
        config.workers = workers;
    }
    if let Some(out) = &overrides.out {
        log::info!("config: out = {} (flag)", out.display());
        config.out = out.clone();
    }
    config.validate()?;
    Ok(config)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    SynthData,
    ExtractFeatures,
    TrainPae,
    TrainGeco,
    ComputeCenters,
    Score,
    GridGamma,
    Evaluate,
    Plot,
    AblateLambda,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::SynthData,
        Stage::ExtractFeatures,
        Stage::TrainPae,
        Stage::TrainGeco,
        Stage::ComputeCenters,
        Stage::Score,
        Stage::GridGamma,
        Stage::Evaluate,
        Stage::Plot,
        Stage::AblateLambda,
    ];

    /// The stages run by [`Pipeline::run_all`].
    pub const MAIN: [Stage; 8] = [
        Stage::SynthData,
        Stage::ExtractFeatures,
        Stage::TrainPae,
        Stage::TrainGeco,
        Stage::ComputeCenters,
        Stage::Score,
        Stage::Evaluate,
        Stage::Plot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::SynthData => "synth-data",
            Stage::ExtractFeatures => "extract-features",
            Stage::TrainPae => "train-pae",
            Stage::TrainGeco => "train-geco",
            Stage::ComputeCenters => "compute-centers",
            Stage::Score => "score",
            Stage::GridGamma => "grid-gamma",
            Stage::Evaluate => "evaluate",
            Stage::Plot => "plot",
            Stage::AblateLambda => "ablate-lambda",
        }
    }

    pub fn dependencies(self) -> &'static [Stage] {
        match self {
            Stage::SynthData => &[],
            Stage::ExtractFeatures => &[Stage::SynthData],
            Stage::TrainPae => &[Stage::ExtractFeatures],
            Stage::TrainGeco => &[Stage::TrainPae],
            Stage::ComputeCenters => &[Stage::TrainGeco],
            Stage::Score => &[Stage::ComputeCenters],
            Stage::GridGamma => &[Stage::Score],
            Stage::Evaluate => &[Stage::Score],
            Stage::Plot => &[Stage::Score],
            Stage::AblateLambda => &[Stage::TrainPae],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StageMarker {
    stage: String,
    config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CentersFile {
    config_hash: String,
    centers: ClassCenters,
}

/// Row of `scores/scored_clips.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScoreRow {
    clip: String,
    machine_type: MachineType,
    machine_id: u32,
    label: crate::data::Label,
    class_index: usize,
    mse: f64,
    cos_simi: f64,
    gamma: f64,
    fused: f64,
    config_hash: String,
}

/// One row of the lambda ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub configuration: String,
    pub auc: f64,
    pub pauc: f64,
}

/// The four balance-factor settings compared by the ablation.
pub fn ablation_variants(base: &GecoTrainConfig) -> Vec<LambdaSchedule> {
    vec![
        LambdaSchedule::Fixed { lambda: 0.0 },
        LambdaSchedule::Fixed { lambda: 1.0 },
        LambdaSchedule::Fixed { lambda: 10.0 },
        LambdaSchedule::Ramp(match base.lambda {
            LambdaSchedule::Ramp(r) => r,
            LambdaSchedule::Fixed { .. } => RampSchedule::default().scaled(base.epochs),
        }),
    ]
}

/// Relative key of a clip: `<type>/<split>/<file>`.
pub fn clip_key(record: &ClipRecord) -> String {
    format!("{}/{}/{}", record.machine_type, record.split.as_str(), record.file_name())
}

pub struct Pipeline {
    config: RunConfig,
    hash: String,
    pool: rayon::ThreadPool,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(Pipeline {
            hash: config.hash(),
            config,
            pool,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn out(&self) -> &Path {
        &self.config.out
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.config.out.join(rel)
    }

    fn ensure_dir(&self, rel: &str) -> Result<PathBuf> {
        let dir = self.path(rel);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    fn marker_path(&self, stage: Stage) -> PathBuf {
        self.path(&format!("stages/{}.json", stage.name()))
    }

    fn check_dependencies(&self, stage: Stage) -> Result<()> {
        for &dep in stage.dependencies() {
            let path = self.marker_path(dep);
            if !path.exists() {
                return Err(Error::MissingDependency {
                    stage: stage.name().into(),
                    missing: dep.name().into(),
                    path,
                });
            }
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let marker: StageMarker = serde_json::from_str(&text)?;
            if marker.config_hash != self.hash {
                return Err(Error::HashMismatch {
                    path,
                    expected: self.hash.clone(),
                    found: marker.config_hash,
                });
            }
        }
        Ok(())
    }

    fn write_json<T: Serialize>(&self, path: &Path, value: &T) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let text = serde_json::to_string_pretty(value)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, path: &Path) -> Result<T> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Runs one stage after checking its prerequisites.
    pub fn run(&self, stage: Stage) -> Result<()> {
        self.check_dependencies(stage)?;
        std::fs::create_dir_all(self.out()).map_err(|e| Error::io(self.out(), e))?;
        let config_path = self.path("config.toml");
        std::fs::write(&config_path, self.config.to_toml()?).map_err(|e| Error::io(&config_path, e))?;
        log::info!("stage {stage} (config {})", &self.hash[..12]);
        self.pool.install(|| match stage {
            Stage::SynthData => self.synth_data(),
            Stage::ExtractFeatures => self.extract_features(),
            Stage::TrainPae => self.train_pae(),
            Stage::TrainGeco => self.train_geco(),
            Stage::ComputeCenters => self.compute_centers(),
            Stage::Score => self.score(),
            Stage::GridGamma => self.grid_gamma().map(|_| ()),
            Stage::Evaluate => self.evaluate().map(|_| ()),
            Stage::Plot => self.plot(),
            Stage::AblateLambda => self.ablate_lambda().map(|_| ()),
        })?;
        self.write_json(
            &self.marker_path(stage),
            &StageMarker {
                stage: stage.name().into(),
                config_hash: self.hash.clone(),
            },
        )
    }

    /// Runs data preparation through plotting.
    pub fn run_all(&self) -> Result<()> {
        for stage in Stage::MAIN {
            self.run(stage)?;
        }
        Ok(())
    }

    // ----- stages -------------------------------------------------------

    /// Writes the manifest: generated clips for the synthetic source, a
    /// scan of the development set otherwise.
    fn synth_data(&self) -> Result<()> {
        let records = match &self.config.data.dcase_root {
            Some(root) => scan_dcase(root)?,
            None => {
                let clips = generate_synthetic(&self.config.data.synth)?;
                write_synthetic(&self.path("data"), &clips)?
            }
        };
        write_manifest(&self.path("manifest.csv"), &records)?;
        log::info!("manifest: {} clips", records.len());
        Ok(())
    }

    pub fn manifest(&self) -> Result<Vec<ClipRecord>> {
        read_manifest(&self.path("manifest.csv"))
    }

    fn feature_path(&self, record: &ClipRecord) -> PathBuf {
        let key = clip_key(record);
        self.path("features").join(Path::new(&key).with_extension("glms"))
    }

    fn extract_features(&self) -> Result<()> {
        let records = self.manifest()?;
        let extractor = LogMelExtractor::new(self.config.features.clone())?;
        let feature_hash = self.config.features.hash();
        let expected_rate = self.config.features.sample_rate;
        records.par_iter().try_for_each(|record| -> Result<()> {
            let path = self.feature_path(record);
            if path.exists() && read_feature_cache(&path, &feature_hash)?.is_some() {
                return Ok(());
            }
            let wave = load_waveform(&record.path)?;
            if wave.sample_rate != expected_rate {
                log::warn!(
                    "{}: sample rate {} Hz, features assume {expected_rate} Hz",
                    record.path.display(),
                    wave.sample_rate
                );
            }
            let spec = extractor.extract(&wave)?;
            write_feature_cache(&path, &spec.values, &feature_hash)
        })
    }

    pub fn load_features(&self, record: &ClipRecord) -> Result<Array2<f32>> {
        let path = self.feature_path(record);
        read_feature_cache(&path, &self.config.features.hash())?.ok_or_else(|| Error::HashMismatch {
            path,
            expected: self.config.features.hash(),
            found: "another feature configuration".into(),
        })
    }

    fn split_features(&self, split: Split) -> Result<Vec<(ClipRecord, Array2<f32>)>> {
        let records: Vec<ClipRecord> = self.manifest()?.into_iter().filter(|r| r.split == split).collect();
        let loaded = records
            .into_par_iter()
            .map(|r| {
                let f = self.load_features(&r)?;
                Ok((r, f))
            })
            .collect::<Result<Vec<_>>>()?;
        let min_frames = self.config.geco.arch.crop_frames;
        Ok(loaded
            .into_iter()
            .filter(|(r, f)| {
                let keep = f.nrows() >= min_frames;
                if !keep {
                    log::warn!("{}: {} frames, shorter than one {min_frames}-frame crop; skipped", clip_key(r), f.nrows());
                }
                keep
            })
            .collect())
    }

    fn pae_path(&self, machine_type: &MachineType) -> PathBuf {
        self.path(&format!("models/{machine_type}/pae.safetensors"))
    }

    fn train_pae(&self) -> Result<()> {
        let train = self.split_features(Split::Train)?;
        let mut by_type: BTreeMap<MachineType, Vec<&Array2<f32>>> = BTreeMap::new();
        for (r, f) in &train {
            by_type.entry(r.machine_type.clone()).or_default().push(f);
        }
        self.ensure_dir("logs")?;
        for (k, (machine_type, clips)) in by_type.into_iter().enumerate() {
            let views: Vec<_> = clips.iter().map(|c| c.view()).collect();
            let seed = self.config.seed.wrapping_mul(1_000).wrapping_add(k as u64);
            let (model, log) = train_pae(
                &views,
                machine_type.clone(),
                self.config.pae.arch.clone(),
                &self.config.pae.train,
                seed,
            )?;
            log::info!(
                "pae {machine_type}: final loss {:.4}",
                log.last().map(|e| e.loss).unwrap_or(f64::NAN)
            );
            model.save(&self.pae_path(&machine_type), &self.hash)?;
            write_pae_log(&self.path(&format!("logs/pae_{machine_type}.csv")), &log)?;
        }
        Ok(())
    }

    pub fn load_paes(&self, types: impl IntoIterator<Item = MachineType>) -> Result<BTreeMap<MachineType, PaeModel>> {
        types
            .into_iter()
            .map(|t| {
                let m = PaeModel::load(&self.pae_path(&t), &self.hash)?;
                Ok((t, m))
            })
            .collect()
    }

    fn train_geco_with(
        &self,
        train: &[(ClipRecord, Array2<f32>)],
        config: &GecoTrainConfig,
    ) -> Result<(GecoModel, Vec<GecoEpoch>)> {
        let clips: Vec<TrainingClip> = train
            .iter()
            .map(|(r, f)| TrainingClip {
                features: f.view(),
                class_index: r.class_index,
                machine_type: r.machine_type.clone(),
            })
            .collect();
        let paes = if config.reconstructions {
            self.load_paes(clips.iter().map(|c| c.machine_type.clone()).collect::<std::collections::BTreeSet<_>>())?
        } else {
            BTreeMap::new()
        };
        train_geco(&clips, &paes, self.config.geco.arch.clone(), config, self.config.seed, None)
    }

    fn train_geco(&self) -> Result<()> {
        let train = self.split_features(Split::Train)?;
        let (model, log) = self.train_geco_with(&train, &self.config.geco.train)?;
        model.save(&self.path("models/geco.safetensors"), &self.hash)?;
        self.ensure_dir("logs")?;
        write_geco_log(&self.path("logs/geco.csv"), &log)
    }

    fn centers_for(&self, model: &GecoModel, train: &[(ClipRecord, Array2<f32>)]) -> Result<ClassCenters> {
        let embeddings = train
            .par_iter()
            .map(|(r, f)| Ok((r.class_index, model.embed_clip(f.view())?)))
            .collect::<Result<Vec<_>>>()?;
        compute_centers(&embeddings, model.n_classes())
    }

    fn compute_centers(&self) -> Result<()> {
        let model = GecoModel::load(&self.path("models/geco.safetensors"), &self.hash)?;
        let train = self.split_features(Split::Train)?;
        let centers = self.centers_for(&model, &train)?;
        self.write_json(
            &self.path("models/centers.json"),
            &CentersFile {
                config_hash: self.hash.clone(),
                centers,
            },
        )
    }

    /// Frame-level PAE score of every test clip.
    fn frame_scores(&self, test: &[(ClipRecord, Array2<f32>)]) -> Result<Vec<f64>> {
        let paes = self.load_paes(test.iter().map(|(r, _)| r.machine_type.clone()).collect::<std::collections::BTreeSet<_>>())?;
        test.par_iter()
            .map(|(r, f)| frame_anomaly_score(&paes[&r.machine_type], f.view()))
            .collect()
    }

    fn cosine_scores(
        &self,
        model: &GecoModel,
        centers: &ClassCenters,
        test: &[(ClipRecord, Array2<f32>)],
    ) -> Result<Vec<f64>> {
        let mut same_type: BTreeMap<MachineType, Vec<usize>> = BTreeMap::new();
        for r in self.manifest()? {
            let ids = same_type.entry(r.machine_type).or_default();
            if !ids.contains(&r.class_index) {
                ids.push(r.class_index);
            }
        }
        test.par_iter()
            .map(|(r, f)| {
                let embedding = model.embed_clip(f.view())?;
                match self.config.centers {
                    CenterMode::LabeledId => centers.cosine(&embedding, r.class_index),
                    CenterMode::MaxSameType => centers.max_cosine(&embedding, &same_type[&r.machine_type]),
                }
            })
            .collect()
    }

    fn score(&self) -> Result<()> {
        let model = GecoModel::load(&self.path("models/geco.safetensors"), &self.hash)?;
        let centers_path = self.path("models/centers.json");
        let centers: CentersFile = self.read_json(&centers_path)?;
        if centers.config_hash != self.hash {
            return Err(Error::HashMismatch {
                path: centers_path,
                expected: self.hash.clone(),
                found: centers.config_hash,
            });
        }
        let test = self.split_features(Split::Test)?;
        let mse = self.frame_scores(&test)?;
        let cos = self.cosine_scores(&model, &centers.centers, &test)?;
        let scored: Vec<ScoredClip> = test
            .into_iter()
            .zip(mse.into_iter().zip(cos))
            .map(|((r, _), (m, c))| {
                let gamma = self.config.fusion.gamma_for(&r.machine_type);
                ScoredClip::new(r, m, c, gamma)
            })
            .collect();
        self.write_scores(&scored)
    }

    fn write_scores(&self, scored: &[ScoredClip]) -> Result<()> {
        let dir = self.ensure_dir("scores")?;
        let mut w = csv::Writer::from_path(dir.join("scored_clips.csv"))?;
        let mut groups: BTreeMap<(MachineType, u32), Vec<&ScoredClip>> = BTreeMap::new();
        for s in scored {
            w.serialize(ScoreRow {
                clip: clip_key(&s.record),
                machine_type: s.record.machine_type.clone(),
                machine_id: s.record.machine_id,
                label: s.record.label,
                class_index: s.record.class_index,
                mse: s.mse,
                cos_simi: s.cos_simi,
                gamma: self.config.fusion.gamma_for(&s.record.machine_type),
                fused: s.fused,
                config_hash: self.hash.clone(),
            })?;
            groups
                .entry((s.record.machine_type.clone(), s.record.machine_id))
                .or_default()
                .push(s);
        }
        w.flush().map_err(|e| Error::io(&dir, e))?;
        for ((t, id), clips) in groups {
            write_score_csv(&dir.join(format!("anomaly_score_{t}_id_{id:02}.csv")), &clips)?;
        }
        Ok(())
    }

    /// Scored test clips as written by `score`, refusing rows stamped with
    /// another config hash.
    pub fn read_scores(&self) -> Result<Vec<ScoredClip>> {
        let path = self.path("scores/scored_clips.csv");
        let mut r = csv::Reader::from_path(&path)?;
        let mut out = Vec::new();
        for row in r.deserialize() {
            let row: ScoreRow = row?;
            if row.config_hash != self.hash {
                return Err(Error::HashMismatch {
                    path: path.clone(),
                    expected: self.hash.clone(),
                    found: row.config_hash,
                });
            }
            let (_, rest) = row.clip.split_once('/').unwrap_or(("", &row.clip));
            out.push(ScoredClip {
                record: ClipRecord {
                    path: PathBuf::from(&row.clip),
                    machine_type: row.machine_type,
                    machine_id: row.machine_id,
                    split: if rest.starts_with("train/") { Split::Train } else { Split::Test },
                    label: row.label,
                    class_index: row.class_index,
                },
                mse: row.mse,
                cos_simi: row.cos_simi,
                fused: row.fused,
            });
        }
        Ok(out)
    }

    fn grid_gamma(&self) -> Result<Vec<crate::scoring::GammaChoice>> {
        let scored = self.read_scores()?;
        let choices = grid_search_gamma(&scored, &self.config.eval.gamma_grid()?, self.config.eval.fpr_max)?;
        self.ensure_dir("results")?;
        write_gamma_csv(&self.path("results/gamma_search.csv"), &choices)?;
        for c in &choices {
            log::info!("gamma* {}: {} (AUC {:.4}, pAUC {:.4})", c.machine_type, c.gamma, c.auc, c.pauc);
        }
        Ok(choices)
    }

    fn evaluate(&self) -> Result<EvalResult> {
        let scored = self.read_scores()?;
        let result = evaluate_scored(&scored, self.config.eval.fpr_max)?;
        self.ensure_dir("results")?;
        write_metrics_csv(&self.path("results/metrics.csv"), &result, &self.hash)?;
        #[derive(Serialize)]
        struct Summary<'a> {
            config_hash: &'a str,
            #[serde(flatten)]
            result: &'a EvalResult,
        }
        self.write_json(
            &self.path("results/metrics.json"),
            &Summary {
                config_hash: &self.hash,
                result: &result,
            },
        )?;
        log::info!(
            "overall AUC {:.2} pAUC {:.2}",
            100.0 * result.overall_auc,
            100.0 * result.overall_pauc
        );
        Ok(result)
    }

    /// Reads `results/metrics.json`.
    pub fn read_metrics(&self) -> Result<EvalResult> {
        self.read_json(&self.path("results/metrics.json"))
    }

    fn plot(&self) -> Result<()> {
        let scored = self.read_scores()?;
        self.ensure_dir("plots")?;
        let mut by_type: BTreeMap<&MachineType, BTreeMap<u32, (Vec<f64>, Vec<bool>)>> = BTreeMap::new();
        for s in scored.iter().filter(|s| s.record.label.is_known()) {
            let e = by_type
                .entry(&s.record.machine_type)
                .or_default()
                .entry(s.record.machine_id)
                .or_default();
            e.0.push(s.fused);
            e.1.push(s.record.label.is_anomaly());
        }
        for (t, ids) in by_type {
            let mut curves = Vec::new();
            for (id, (scores, labels)) in ids {
                if let Ok(points) = roc_curve(&scores, &labels) {
                    curves.push(Series {
                        name: format!("id {id:02}"),
                        points,
                    });
                }
            }
            plot_roc(&self.path(&format!("plots/roc_{t}.svg")), &format!("ROC, {t}"), &curves)?;
        }
        let mut pae_curves = Vec::new();
        for entry in std::fs::read_dir(self.path("logs")).map_err(|e| Error::io(self.path("logs"), e))? {
            let path = entry.map_err(|e| Error::io(self.path("logs"), e))?.path();
            let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            if let Some(t) = name.strip_prefix("pae_") {
                let mut r = csv::Reader::from_path(&path)?;
                let points = r
                    .deserialize::<PaeEpoch>()
                    .map(|e| e.map(|e| (e.epoch as f64, e.loss)))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                pae_curves.push(Series {
                    name: t.to_string(),
                    points,
                });
            }
        }
        pae_curves.sort_by(|a, b| a.name.cmp(&b.name));
        plot_losses(&self.path("plots/loss_pae.svg"), "PAE masked MSE", &pae_curves)?;
        let geco_log = self.path("logs/geco.csv");
        if geco_log.exists() {
            let mut r = csv::Reader::from_path(&geco_log)?;
            let log: Vec<GecoEpoch> = r.deserialize().collect::<std::result::Result<_, _>>()?;
            let series = |name: &str, f: fn(&GecoEpoch) -> f64| Series {
                name: name.into(),
                points: log.iter().map(|e| (e.epoch as f64, f(e))).collect(),
            };
            plot_losses(
                &self.path("plots/loss_geco.svg"),
                "GeCo training",
                &[
                    series("cross-entropy", |e| e.loss_ce),
                    series("contrastive", |e| e.loss_con),
                    series("total", |e| e.loss_total),
                ],
            )?;
        }
        Ok(())
    }

    /// Trains one extractor per balance-factor setting and evaluates each
    /// with the configured fusion.
    pub fn ablate_lambda(&self) -> Result<Vec<AblationRow>> {
        let train = self.split_features(Split::Train)?;
        let test = self.split_features(Split::Test)?;
        let mse = self.frame_scores(&test)?;
        let mut rows = Vec::new();
        for lambda in ablation_variants(&self.config.geco.train) {
            let config = GecoTrainConfig {
                lambda,
                reconstructions: true,
                ..self.config.geco.train.clone()
            };
            let label = lambda.label();
            log::info!("ablation: {label}");
            let (model, _) = self.train_geco_with(&train, &config)?;
            let centers = self.centers_for(&model, &train)?;
            let cos = self.cosine_scores(&model, &centers, &test)?;
            let scored: Vec<ScoredClip> = test
                .iter()
                .zip(mse.iter().zip(&cos))
                .map(|((r, _), (&m, &c))| ScoredClip::new(r.clone(), m, c, self.config.fusion.gamma_for(&r.machine_type)))
                .collect();
            let result = evaluate_scored(&scored, self.config.eval.fpr_max)?;
            log::info!("{label}: AUC {:.4} pAUC {:.4}", result.overall_auc, result.overall_pauc);
            rows.push(AblationRow {
                configuration: label,
                auc: result.overall_auc,
                pauc: result.overall_pauc,
            });
        }
        self.ensure_dir("results")?;
        let path = self.path("results/ablation_lambda.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["configuration", "auc", "pauc", "config_hash"])?;
        for r in &rows {
            w.write_record([
                r.configuration.as_str(),
                &format!("{:.2}", 100.0 * r.auc),
                &format!("{:.2}", 100.0 * r.pauc),
                &self.hash,
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(rows)
    }
}

/// Evaluates fused scores of labelled clips.
pub fn evaluate_scored(scored: &[ScoredClip], fpr_max: f64) -> Result<EvalResult> {
    let labeled: Vec<LabeledScore> = scored
        .iter()
        .filter(|s| s.record.label.is_known())
        .map(|s| LabeledScore {
            machine_type: s.record.machine_type.clone(),
            machine_id: s.record.machine_id,
            score: s.fused,
            is_anomaly: s.record.label.is_anomaly(),
        })
        .collect();
    evaluate(&labeled, fpr_max)
}

pub fn write_pae_log(path: &Path, log: &[PaeEpoch]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in log {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// `epoch,lr,lambda,loss_ce,loss_con,loss_total`.
pub fn write_geco_log(path: &Path, log: &[GecoEpoch]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in log {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let c = RunConfig::tiny_synthetic();
        let text = c.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.hash(), back.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("seeed = 3").unwrap_err().to_string();
        assert!(err.contains("seeed"), "{err}");
        let err = RunConfig::from_toml("[geco.train]\nlamda = 3").unwrap_err().to_string();
        assert!(err.contains("lamda"), "{err}");
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = RunConfig::from_toml("seed = 9\n[fusion]\nmode = \"global\"\ngamma = 120.0\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.fusion, FusionConfig::Global { gamma: 120.0 });
        assert_eq!(c.geco.train.epochs, 120);
    }

    #[test]
    fn out_and_workers_do_not_change_the_hash() {
        let a = RunConfig::default();
        let b = RunConfig {
            out: "elsewhere".into(),
            workers: 3,
            ..RunConfig::default()
        };
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig { seed: 1, ..a.clone() };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.toml");
        std::fs::write(&file, "seed = 4\nworkers = 2\n").unwrap();
        let c = resolve_config(
            Some(&file),
            &Overrides {
                seed: Some(7),
                ..Overrides::default()
            },
        )
        .unwrap();
        assert_eq!((c.seed, c.workers), (7, 2));
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("train".parse::<Stage>().is_err());
    }

    #[test]
    fn evaluate_before_score_names_score() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(RunConfig {
            out: dir.path().to_path_buf(),
            ..RunConfig::tiny_synthetic()
        })
        .unwrap();
        let err = p.run(Stage::Evaluate).unwrap_err();
        match err {
            Error::MissingDependency { ref missing, .. } => assert_eq!(missing, "score"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn gamma_grid_default() {
        let g = EvalConfig::default().gamma_grid().unwrap();
        assert_eq!(g.first(), Some(&50.0));
        assert_eq!(g.last(), Some(&500.0));
        assert_eq!(g.len(), 91);
    }

    #[test]
    fn ablation_has_four_labelled_rows() {
        let labels: Vec<String> = ablation_variants(&GecoTrainConfig::default().scaled(24))
            .iter()
            .map(|l| l.label())
            .collect();
        assert_eq!(labels, ["lambda=0", "lambda=1", "lambda=10", "with lambda ramp-up"]);
    }
}
