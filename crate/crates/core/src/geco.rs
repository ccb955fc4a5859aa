//! Joint generative / contrastive training of the residual convolutional
//! extractor.
//!
//! Each minibatch holds `N` random 65-frame crops and, unless running the
//! plain-classifier baseline, their PAE reconstructions: one random frame per
//! 5-frame group is replaced by the frozen PAE's prediction. The loss is
//! cross-entropy over machine IDs on all `2N` rows plus `lambda` times a
//! contrastive term that pulls same-class originals together and pushes each
//! original away from its own reconstruction.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, HASH_KEY};
use crate::data::MachineType;
use crate::features::{crop_start, FeatureStats};
use crate::losses::{batch_contrastive_loss, bce_proxy_loss, cross_entropy};
use crate::nn::{l2_normalize, BatchNorm2d, Conv2d, Linear, ParamStore, SgdMomentum};
use crate::pae::FramePredictor;
use crate::schedule::{LambdaSchedule, RampSchedule, StepLr};
use crate::{Error, Result};

/// Frames per training crop.
pub const CROP_FRAMES: usize = 65;
/// Stride between crops when embedding a whole clip.
pub const CROP_STRIDE: usize = 32;

/// Extractor shape: a strided 3x3 stem followed by stages of basic residual
/// blocks, global average pooling and a linear projection to `embed_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GecoArch {
    pub n_mels: usize,
    pub crop_frames: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    /// Residual blocks per stage; every stage after the first halves the
    /// resolution.
    pub stages: Vec<usize>,
    pub channels: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for GecoArch {
    fn default() -> Self {
        GecoArch {
            n_mels: 128,
            crop_frames: CROP_FRAMES,
            stem_channels: 64,
            stem_stride: 2,
            stages: vec![2, 2, 2, 2],
            channels: vec![64, 128, 256, 512],
            embed_dim: 128,
        }
    }
}

impl GecoArch {
    pub fn tiny(n_mels: usize) -> Self {
        GecoArch {
            n_mels,
            stem_channels: 8,
            stages: vec![1, 1, 1],
            channels: vec![8, 16, 32],
            embed_dim: 32,
            ..GecoArch::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.stages.len() != self.channels.len() || self.stages.is_empty() {
            return Err(Error::Config("extractor needs one channel count per stage".into()));
        }
        if self.crop_frames == 0 || self.crop_frames % 5 != 0 {
            return Err(Error::Config("crop length must be a positive multiple of 5".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    /// Softmax over same-class originals and the anchor's reconstruction.
    SoftmaxEq2,
    /// Two proxies per class, binary original-vs-reconstruction decision.
    BceProxy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GecoTrainConfig {
    pub epochs: usize,
    /// Originals per step; the losses see twice as many rows when
    /// reconstructions are on.
    pub batch_size: usize,
    pub lr: StepLr,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss_form: LossForm,
    pub temperature: f64,
    pub lambda: LambdaSchedule,
    /// `false` gives the vanilla ID classifier: no reconstructions, and the
    /// contrastive term is never evaluated.
    pub reconstructions: bool,
    /// Cross-entropy over all `2N` rows (`true`) or originals only.
    pub ce_on_reconstructions: bool,
    /// Stops training after this many optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for GecoTrainConfig {
    fn default() -> Self {
        GecoTrainConfig {
            epochs: 120,
            batch_size: 32,
            lr: StepLr {
                boundaries: vec![50, 90],
                values: vec![0.1, 0.01, 0.001],
            },
            momentum: 0.9,
            weight_decay: 1e-4,
            loss_form: LossForm::BceProxy,
            temperature: 1.0,
            lambda: LambdaSchedule::Ramp(RampSchedule::default()),
            reconstructions: true,
            ce_on_reconstructions: true,
            max_steps: None,
        }
    }
}

impl GecoTrainConfig {
    /// Same lr steps and ramp proportions over `epochs`.
    pub fn scaled(&self, epochs: usize) -> Self {
        GecoTrainConfig {
            epochs,
            lr: self.lr.scaled(self.epochs, epochs),
            lambda: match self.lambda {
                LambdaSchedule::Ramp(r) => LambdaSchedule::Ramp(r.scaled(epochs)),
                fixed => fixed,
            },
            ..self.clone()
        }
    }

    /// The plain-classifier configuration.
    pub fn baseline(&self) -> Self {
        GecoTrainConfig {
            reconstructions: false,
            lambda: LambdaSchedule::Fixed { lambda: 0.0 },
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lr.validate()?;
        if let LambdaSchedule::Ramp(r) = &self.lambda {
            r.validate()?;
            if r.total != self.epochs {
                return Err(Error::Config(format!(
                    "lambda ramp spans {} epochs, training runs {}",
                    r.total, self.epochs
                )));
            }
        }
        if let LambdaSchedule::Fixed { lambda } = self.lambda {
            if !(lambda >= 0.0) {
                return Err(Error::Config("lambda must be non-negative".into()));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Config("GeCo batch size must be at least 2".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Replaces one uniformly random frame in every consecutive 5-frame group of
/// `x` by the predictor's output. Returns the new matrix and the replaced
/// frame indices.
pub fn reconstruct_augment<P, R>(x: ArrayView2<f32>, predictor: &P, rng: &mut R) -> Result<(Array2<f32>, Vec<usize>)>
where
    P: FramePredictor + ?Sized,
    R: Rng + ?Sized,
{
    let mut out = reconstruct_many(&[x], predictor, rng)?;
    Ok(out.pop().expect("one input, one output"))
}

/// Batched [`reconstruct_augment`]: one predictor call for all crops.
pub fn reconstruct_many<P, R>(
    crops: &[ArrayView2<f32>],
    predictor: &P,
    rng: &mut R,
) -> Result<Vec<(Array2<f32>, Vec<usize>)>>
where
    P: FramePredictor + ?Sized,
    R: Rng + ?Sized,
{
    const W: usize = 5;
    let Some(first) = crops.first() else {
        return Ok(Vec::new());
    };
    let n_mels = first.ncols();
    let mut flat: Vec<f32> = Vec::new();
    let mut targets = Vec::new();
    for x in crops {
        let (frames, m) = x.dim();
        if frames % W != 0 || frames == 0 {
            return Err(Error::invalid(format!(
                "{frames} frames do not split into 5-frame groups"
            )));
        }
        if m != n_mels {
            return Err(Error::invalid("crops disagree on mel count"));
        }
        for g in 0..frames / W {
            flat.extend(x.slice(s![g * W..(g + 1) * W, ..]).iter());
            targets.push(rng.random_range(0..W));
        }
    }
    let windows = Tensor::from_vec(flat, (targets.len(), W, n_mels), &Device::Cpu)?;
    let predicted = predictor
        .predict_frames(&windows, &targets)?
        .to_dtype(DType::F32)?
        .to_vec2::<f32>()?;
    let mut out = Vec::with_capacity(crops.len());
    let mut k = 0;
    for x in crops {
        let mut y = x.to_owned();
        let mut positions = Vec::with_capacity(x.nrows() / W);
        for g in 0..x.nrows() / W {
            let pos = g * W + targets[k];
            y.row_mut(pos).iter_mut().zip(&predicted[k]).for_each(|(v, &p)| *v = p);
            positions.push(pos);
            k += 1;
        }
        out.push((y, positions));
    }
    Ok(out)
}

struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Result<Self> {
        let shortcut = if stride != 1 || c_in != c_out {
            Some((
                Conv2d::new(store, rng, &format!("{name}.down.conv"), c_in, c_out, 1, stride, 0)?,
                BatchNorm2d::new(store, &format!("{name}.down.bn"), c_out)?,
            ))
        } else {
            None
        };
        Ok(BasicBlock {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), c_in, c_out, 3, stride, 1)?,
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), c_out)?,
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1)?,
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), c_out)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        let h = self.bn2.forward(&self.conv2.forward(&h)?, train)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

/// Extractor, ID classification head and per-class proxies.
pub struct GecoModel {
    arch: GecoArch,
    n_classes: usize,
    store: ParamStore,
    input_mean: Var,
    input_std: Var,
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    blocks: Vec<BasicBlock>,
    embed: Linear,
    head: Linear,
    w_pos: Tensor,
    w_neg: Tensor,
}

impl GecoModel {
    pub fn new(arch: GecoArch, n_classes: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        if n_classes < 2 {
            return Err(Error::invalid("ID classification needs at least two classes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let input_mean = store.buffer("input.mean", vec![0.0], &[1])?;
        let input_std = store.buffer("input.std", vec![1.0], &[1])?;
        let stem = Conv2d::new(&mut store, &mut rng, "stem.conv", 1, arch.stem_channels, 3, arch.stem_stride, 1)?;
        let stem_bn = BatchNorm2d::new(&mut store, "stem.bn", arch.stem_channels)?;
        let mut blocks = Vec::new();
        let mut c_in = arch.stem_channels;
        for (s, (&n, &c)) in arch.stages.iter().zip(&arch.channels).enumerate() {
            for b in 0..n {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(&mut store, &mut rng, &format!("layer{s}.{b}"), c_in, c, stride)?);
                c_in = c;
            }
        }
        let embed = Linear::new(&mut store, &mut rng, "embed", c_in, arch.embed_dim)?;
        let head = Linear::new(&mut store, &mut rng, "head", arch.embed_dim, n_classes)?;
        let w_pos = store.normal(&mut rng, "proxy.pos", &[n_classes, arch.embed_dim], 1.0)?;
        let w_neg = store.normal(&mut rng, "proxy.neg", &[n_classes, arch.embed_dim], 1.0)?;
        Ok(GecoModel {
            arch,
            n_classes,
            store,
            input_mean,
            input_std,
            stem,
            stem_bn,
            blocks,
            embed,
            head,
            w_pos,
            w_neg,
        })
    }

    pub fn arch(&self) -> &GecoArch {
        &self.arch
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    /// Sets the global input normalisation applied to every crop, original
    /// or reconstructed.
    pub fn set_input_stats(&self, stats: &FeatureStats) -> Result<()> {
        self.input_mean.set(&Tensor::new(&[stats.mean], &Device::Cpu)?)?;
        self.input_std.set(&Tensor::new(&[stats.std.max(1e-6)], &Device::Cpu)?)?;
        Ok(())
    }

    pub fn input_stats(&self) -> Result<FeatureStats> {
        Ok(FeatureStats {
            mean: self.input_mean.to_vec1::<f32>()?[0],
            std: self.input_std.to_vec1::<f32>()?[0],
        })
    }

    /// Unnormalised embeddings `[b, d]` of crops `[b, frames, n_mels]`.
    pub fn embed_raw(&self, crops: &Tensor, train: bool) -> Result<Tensor> {
        let (b, t, m) = crops.dims3()?;
        if m != self.arch.n_mels {
            return Err(Error::invalid(format!("extractor expects {} mels, got {m}", self.arch.n_mels)));
        }
        let x = crops
            .broadcast_sub(self.input_mean.as_tensor())?
            .broadcast_div(self.input_std.as_tensor())?
            .reshape((b, 1, t, m))?;
        let mut h = self.stem_bn.forward(&self.stem.forward(&x)?, train)?.relu()?;
        for block in &self.blocks {
            h = block.forward(&h, train)?;
        }
        let pooled = h.mean(3)?.mean(2)?;
        self.embed.forward(&pooled)
    }

    /// L2-normalised embeddings.
    pub fn embed(&self, crops: &Tensor, train: bool) -> Result<Tensor> {
        l2_normalize(&self.embed_raw(crops, train)?)
    }

    pub fn logits(&self, raw_embedding: &Tensor) -> Result<Tensor> {
        self.head.forward(raw_embedding)
    }

    /// Normalised proxies gathered per row: `(w_p[labels], w_n[labels])`.
    pub fn proxies(&self, labels: &[usize]) -> Result<(Tensor, Tensor)> {
        let idx = Tensor::from_vec(labels.iter().map(|&l| l as u32).collect::<Vec<_>>(), labels.len(), &Device::Cpu)?;
        Ok((
            l2_normalize(&self.w_pos.index_select(&idx, 0)?)?,
            l2_normalize(&self.w_neg.index_select(&idx, 0)?)?,
        ))
    }

    /// Crop start frames used to embed a whole clip.
    pub fn crop_starts(&self, n_frames: usize) -> Result<Vec<usize>> {
        let len = self.arch.crop_frames;
        if n_frames < len {
            return Err(Error::invalid(format!("clip has {n_frames} frames, a crop needs {len}")));
        }
        Ok((0..=n_frames - len).step_by(CROP_STRIDE).collect())
    }

    /// Clip embedding: mean of the normalised embeddings of all crops at
    /// stride 32, normalised again.
    pub fn embed_clip(&self, spec: ArrayView2<f32>) -> Result<Vec<f32>> {
        let len = self.arch.crop_frames;
        let starts = self.crop_starts(spec.nrows())?;
        let mut flat: Vec<f32> = Vec::with_capacity(starts.len() * len * spec.ncols());
        for &s0 in &starts {
            flat.extend(spec.slice(s![s0..s0 + len, ..]).iter());
        }
        let crops = Tensor::from_vec(flat, (starts.len(), len, spec.ncols()), &Device::Cpu)?;
        let z = self.embed(&crops, false)?.mean(0)?.unsqueeze(0)?;
        let z = l2_normalize(&z)?.squeeze(0)?.to_vec1::<f32>()?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("clip embedding".into()));
        }
        Ok(z)
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let metadata = BTreeMap::from([
            (HASH_KEY.to_string(), config_hash.to_string()),
            ("arch".to_string(), serde_json::to_string(&self.arch)?),
            ("n_classes".to_string(), self.n_classes.to_string()),
        ]);
        save_checkpoint(path, &self.store.named_tensors(), &metadata)
    }

    pub fn load(path: &Path, expected_hash: &str) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        ckpt.verify_hash(path, expected_hash)?;
        let field = |key: &str| {
            ckpt.metadata.get(key).cloned().ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                reason: format!("checkpoint metadata lacks `{key}`"),
            })
        };
        let arch: GecoArch = serde_json::from_str(&field("arch")?)?;
        let n_classes = field("n_classes")?.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            reason: "bad n_classes".into(),
        })?;
        let model = GecoModel::new(arch, n_classes, 0)?;
        model.store.load(&ckpt.tensors)?;
        Ok(model)
    }
}

/// `N` originals and, optionally, their reconstructions. Row `N + i` of
/// the combined batch is the reconstruction of row `i`.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub originals: Tensor,
    pub reconstructions: Option<Tensor>,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(originals: &[Array2<f32>], reconstructions: Option<&[Array2<f32>]>, labels: Vec<usize>) -> Result<Self> {
        let stack = |xs: &[Array2<f32>]| -> Result<Tensor> {
            let (t, m) = xs[0].dim();
            let mut flat: Vec<f32> = Vec::with_capacity(xs.len() * t * m);
            for x in xs {
                if x.dim() != (t, m) {
                    return Err(Error::invalid("crops in a batch differ in shape"));
                }
                flat.extend(x.iter());
            }
            Ok(Tensor::from_vec(flat, (xs.len(), t, m), &Device::Cpu)?)
        };
        if originals.is_empty() || originals.len() != labels.len() {
            return Err(Error::invalid("batch needs one label per original"));
        }
        let reconstructions = match reconstructions {
            Some(r) if r.len() != originals.len() => {
                return Err(Error::invalid("one reconstruction per original required"))
            }
            Some(r) => Some(stack(r)?),
            None => None,
        };
        Ok(LabeledBatch {
            originals: stack(originals)?,
            reconstructions,
            labels,
        })
    }

    pub fn n_originals(&self) -> usize {
        self.labels.len()
    }

    /// Rows seen by the losses: `2N` with reconstructions, `N` without.
    pub fn len(&self) -> usize {
        self.labels.len() * if self.reconstructions.is_some() { 2 } else { 1 }
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Index of the original that row `row` of the combined batch derives
    /// from.
    pub fn source_of(&self, row: usize) -> usize {
        row % self.labels.len()
    }

    /// Class label of every row of the combined batch.
    pub fn combined_labels(&self) -> Vec<usize> {
        (0..self.len()).map(|r| self.labels[self.source_of(r)]).collect()
    }

    fn inputs(&self) -> Result<Tensor> {
        Ok(match &self.reconstructions {
            Some(r) => Tensor::cat(&[&self.originals, r], 0)?,
            None => self.originals.clone(),
        })
    }
}

/// Loss components for one step.
pub struct LossParts {
    pub ce: Tensor,
    pub con: Tensor,
    pub total: Tensor,
    /// Rows that entered the cross-entropy.
    pub ce_rows: usize,
    /// Rows whose embeddings entered the contrastive term.
    pub con_rows: usize,
    /// Anchors without any same-class positive (softmax form only).
    pub skipped_anchors: usize,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// `L_CE + lambda * L_Con` on a batch, in training mode.
pub fn total_loss(
    model: &GecoModel,
    batch: &LabeledBatch,
    lambda: f64,
    config: &GecoTrainConfig,
) -> Result<LossParts> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be non-negative, got {lambda}")));
    }
    let n = batch.n_originals();
    let raw = model.embed_raw(&batch.inputs()?, true)?;
    let labels = batch.combined_labels();
    let logits = model.logits(&raw)?;
    let ce_rows = if config.ce_on_reconstructions { labels.len() } else { n };
    let ce = cross_entropy(&logits.narrow(0, 0, ce_rows)?, &labels[..ce_rows])?;
    let (con, con_rows, skipped) = match batch.reconstructions {
        Some(_) => {
            let z = l2_normalize(&raw)?;
            match config.loss_form {
                LossForm::SoftmaxEq2 => {
                    let out = batch_contrastive_loss(
                        &z.narrow(0, 0, n)?,
                        &z.narrow(0, n, n)?,
                        &batch.labels,
                        config.temperature,
                    )?;
                    (out.loss, 2 * n, out.skipped)
                }
                LossForm::BceProxy => {
                    let (wp, wn) = model.proxies(&labels)?;
                    let mut t = vec![1f32; n];
                    t.extend(std::iter::repeat_n(0f32, n));
                    let targets = Tensor::from_vec(t, 2 * n, &Device::Cpu)?;
                    (bce_proxy_loss(&z, &wp, &wn, &targets, config.temperature)?, 2 * n, 0)
                }
            }
        }
        None => (Tensor::zeros((), DType::F32, &Device::Cpu)?, 0, 0),
    };
    for (what, t) in [("cross-entropy", &ce), ("contrastive", &con)] {
        if !scalar(t)?.is_finite() {
            return Err(Error::NonFinite(format!("{what} loss")));
        }
    }
    let total = if lambda == 0.0 { ce.clone() } else { (&ce + (&con * lambda)?)? };
    Ok(LossParts {
        ce,
        con,
        total,
        ce_rows,
        con_rows,
        skipped_anchors: skipped,
    })
}

/// A training clip: features plus identity.
#[derive(Debug, Clone)]
pub struct TrainingClip<'a> {
    pub features: ArrayView2<'a, f32>,
    pub class_index: usize,
    pub machine_type: MachineType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GecoEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub lambda: f64,
    pub loss_ce: f64,
    pub loss_con: f64,
    pub loss_total: f64,
}

/// What a step observer sees.
pub struct StepRecord<'a> {
    pub epoch: usize,
    pub step: usize,
    pub batch: &'a LabeledBatch,
    pub parts: &'a LossParts,
}

/// Trains the extractor. `predictors` maps each machine type to its frozen
/// PAE; it may be empty when `config.reconstructions` is off.
pub fn train_geco<P: FramePredictor>(
    clips: &[TrainingClip],
    predictors: &BTreeMap<MachineType, P>,
    arch: GecoArch,
    config: &GecoTrainConfig,
    seed: u64,
    mut observer: Option<&mut dyn FnMut(&StepRecord) -> Result<()>>,
) -> Result<(GecoModel, Vec<GecoEpoch>)> {
    config.validate()?;
    let n_classes = clips.iter().map(|c| c.class_index + 1).max().unwrap_or(0);
    let mut per_class = vec![0usize; n_classes];
    for c in clips {
        per_class[c.class_index] += 1;
    }
    if let Some(empty) = per_class.iter().position(|&k| k == 0) {
        return Err(Error::invalid(format!("class {empty} has no training clips")));
    }
    if config.reconstructions {
        for c in clips {
            if !predictors.contains_key(&c.machine_type) {
                return Err(Error::invalid(format!("no PAE for machine type {}", c.machine_type)));
            }
        }
    }
    let model = GecoModel::new(arch, n_classes, seed)?;
    model.set_input_stats(&FeatureStats::from_spectrograms(clips.iter().map(|c| c.features))?)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6EC0_0000_0000_0002);
    let mut opt = SgdMomentum::new(model.store.trainable(), config.lr.at(0), config.momentum, config.weight_decay);
    let n = config.batch_size.min(clips.len());
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut steps = 0usize;
    'epochs: for epoch in 0..config.epochs {
        let lr = config.lr.at(epoch);
        let lambda = config.lambda.lambda_at(epoch)?;
        opt.set_lr(lr);
        order.shuffle(&mut rng);
        let (mut sum_ce, mut sum_con, mut sum_total, mut count) = (0.0, 0.0, 0.0, 0usize);
        for (step, chunk) in order.chunks_exact(n).enumerate() {
            if config.max_steps.is_some_and(|m| steps >= m) {
                break 'epochs;
            }
            let crops = chunk
                .iter()
                .map(|&i| {
                    let len = model.arch.crop_frames;
                    let start = crop_start(clips[i].features.nrows(), len, &mut rng)?;
                    Ok(clips[i].features.slice(s![start..start + len, ..]).to_owned())
                })
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = chunk.iter().map(|&i| clips[i].class_index).collect();
            let recon = if config.reconstructions {
                Some(reconstruct_grouped(clips, chunk, &crops, predictors, &mut rng)?)
            } else {
                None
            };
            let batch = LabeledBatch::new(&crops, recon.as_deref(), labels)?;
            let parts = total_loss(&model, &batch, lambda, config)?;
            if let Some(obs) = observer.as_mut() {
                obs(&StepRecord {
                    epoch,
                    step,
                    batch: &batch,
                    parts: &parts,
                })?;
            }
            opt.step(&parts.total.backward()?)?;
            sum_ce += scalar(&parts.ce)?;
            sum_con += scalar(&parts.con)?;
            sum_total += scalar(&parts.total)?;
            count += 1;
            steps += 1;
        }
        let k = count.max(1) as f64;
        let record = GecoEpoch {
            epoch,
            lr,
            lambda,
            loss_ce: sum_ce / k,
            loss_con: sum_con / k,
            loss_total: sum_total / k,
        };
        log::debug!(
            "geco epoch {epoch}: ce {:.4} con {:.4} lambda {lambda} lr {lr}",
            record.loss_ce,
            record.loss_con
        );
        log.push(record);
    }
    Ok((model, log))
}

/// Reconstructs every crop with the PAE of its clip's machine type, one
/// predictor call per type.
fn reconstruct_grouped<P: FramePredictor, R: Rng>(
    clips: &[TrainingClip],
    chunk: &[usize],
    crops: &[Array2<f32>],
    predictors: &BTreeMap<MachineType, P>,
    rng: &mut R,
) -> Result<Vec<Array2<f32>>> {
    let mut by_type: BTreeMap<&MachineType, Vec<usize>> = BTreeMap::new();
    for (k, &i) in chunk.iter().enumerate() {
        by_type.entry(&clips[i].machine_type).or_default().push(k);
    }
    let mut out: Vec<Option<Array2<f32>>> = vec![None; crops.len()];
    for (machine_type, rows) in by_type {
        let views: Vec<_> = rows.iter().map(|&k| crops[k].view()).collect();
        let rebuilt = reconstruct_many(&views, &predictors[machine_type], rng)?;
        for (&k, (y, _)) in rows.iter().zip(rebuilt) {
            out[k] = Some(y);
        }
    }
    Ok(out.into_iter().map(|y| y.expect("every crop reconstructed")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    /// Predicts every masked frame as a constant.
    struct ConstPredictor(f32);

    impl FramePredictor for ConstPredictor {
        fn predict_frames(&self, windows: &Tensor, _targets: &[usize]) -> Result<Tensor> {
            let (b, _, m) = windows.dims3()?;
            Ok(Tensor::full(self.0, (b, m), &Device::Cpu)?)
        }
    }

    /// Returns the true frame: the identity oracle.
    struct CopyPredictor;

    impl FramePredictor for CopyPredictor {
        fn predict_frames(&self, windows: &Tensor, targets: &[usize]) -> Result<Tensor> {
            let rows = targets
                .iter()
                .enumerate()
                .map(|(i, &t)| windows.get(i)?.get(t))
                .collect::<candle_core::Result<Vec<_>>>()?;
            Ok(Tensor::stack(&rows, 0)?)
        }
    }

    fn ramp_input(frames: usize, mels: usize) -> Array2<f32> {
        Array2::from_shape_fn((frames, mels), |(t, m)| (t * mels + m) as f32)
    }

    #[test]
    fn augment_replaces_one_frame_per_group() {
        let x = ramp_input(65, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (y, positions) = reconstruct_augment(x.view(), &ConstPredictor(-1.0), &mut rng).unwrap();
        assert_eq!(positions.len(), 13);
        let changed: Vec<usize> = (0..65).filter(|&t| x.row(t) != y.row(t)).collect();
        assert_eq!(changed, positions);
        for (g, &p) in positions.iter().enumerate() {
            assert_eq!(p / 5, g);
        }
    }

    #[test]
    fn identity_oracle_is_a_fixed_point() {
        let x = ramp_input(65, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (y, _) = reconstruct_augment(x.view(), &CopyPredictor, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn augment_positions_follow_the_rng() {
        let x = ramp_input(65, 4);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            reconstruct_augment(x.view(), &ConstPredictor(0.0), &mut rng).unwrap().1
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn augment_rejects_partial_groups() {
        let x = ramp_input(64, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(reconstruct_augment(x.view(), &ConstPredictor(0.0), &mut rng).is_err());
    }

    fn tiny_model(classes: usize) -> GecoModel {
        GecoModel::new(GecoArch::tiny(16), classes, 0).unwrap()
    }

    fn random_batch(n: usize, classes: usize, with_recon: bool, seed: u64) -> LabeledBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let crops: Vec<Array2<f32>> = (0..n)
            .map(|_| Array2::from_shape_fn((65, 16), |_| rng.random_range(-1.0..1.0)))
            .collect();
        let recon: Vec<Array2<f32>> = crops.iter().map(|c| c.mapv(|v| v * 0.5)).collect();
        let labels = (0..n).map(|i| i % classes).collect();
        LabeledBatch::new(&crops, with_recon.then_some(&recon[..]), labels).unwrap()
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let model = tiny_model(3);
        let batch = random_batch(6, 3, false, 0);
        let z = model.embed(&batch.originals, false).unwrap().to_vec2::<f32>().unwrap();
        for row in z {
            let norm: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn combined_batch_doubles_and_keeps_labels() {
        let batch = random_batch(8, 3, true, 1);
        assert_eq!(batch.len(), 16);
        let labels = batch.combined_labels();
        for i in 0..8 {
            assert_eq!(labels[8 + i], labels[i]);
            assert_eq!(batch.source_of(8 + i), i);
        }
    }

    fn loss_values(lambda: f64, form: LossForm) -> (f64, f64, f64) {
        let model = tiny_model(3);
        let batch = random_batch(6, 3, true, 2);
        let config = GecoTrainConfig {
            loss_form: form,
            ..GecoTrainConfig::default()
        };
        let parts = total_loss(&model, &batch, lambda, &config).unwrap();
        (scalar(&parts.ce).unwrap(), scalar(&parts.con).unwrap(), scalar(&parts.total).unwrap())
    }

    #[test]
    fn total_is_linear_in_lambda() {
        for form in [LossForm::BceProxy, LossForm::SoftmaxEq2] {
            let (ce0, _, t0) = loss_values(0.0, form);
            assert_eq!(t0, ce0);
            let (ce1, con1, t1) = loss_values(1.0, form);
            assert!((t1 - (ce1 + con1)).abs() < 1e-5);
            let (ce2, _, t2) = loss_values(2.0, form);
            assert!(((t2 - ce2) - 2.0 * (t1 - ce1)).abs() < 1e-4);
        }
    }

    #[test]
    fn lambda_zero_ignores_the_contrastive_branch() {
        let model = tiny_model(3);
        let batch = random_batch(6, 3, true, 3);
        let parts = total_loss(&model, &batch, 0.0, &GecoTrainConfig::default()).unwrap();
        let grads = parts.total.backward().unwrap();
        assert!(grads.get(&model.w_pos).is_none());
        assert!(grads.get(&model.w_neg).is_none());
    }

    #[test]
    fn negative_lambda_is_rejected() {
        let model = tiny_model(3);
        let batch = random_batch(4, 2, true, 4);
        assert!(total_loss(&model, &batch, -1.0, &GecoTrainConfig::default()).is_err());
    }

    #[test]
    fn missing_class_is_an_error() {
        let feats = ramp_input(70, 16);
        let clips = vec![
            TrainingClip {
                features: feats.view(),
                class_index: 0,
                machine_type: MachineType::new("A"),
            },
            TrainingClip {
                features: feats.view(),
                class_index: 2,
                machine_type: MachineType::new("A"),
            },
        ];
        let predictors: BTreeMap<MachineType, ConstPredictor> = BTreeMap::new();
        let config = GecoTrainConfig::default().baseline().scaled(1);
        let err = train_geco(&clips, &predictors, GecoArch::tiny(16), &config, 0, None)
            .err()
            .unwrap();
        assert!(err.to_string().contains("class 1"), "{err}");
    }

    #[test]
    fn scaled_config_keeps_schedule_shape() {
        let c = GecoTrainConfig::default().scaled(24);
        assert_eq!(c.lr.boundaries, vec![10, 18]);
        match c.lambda {
            LambdaSchedule::Ramp(r) => assert_eq!((r.warmup_end, r.ramp_end, r.total), (6, 18, 24)),
            _ => panic!("ramp expected"),
        }
        c.validate().unwrap();
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("geco.safetensors");
        let model = tiny_model(3);
        model
            .set_input_stats(&FeatureStats { mean: -40.0, std: 12.0 })
            .unwrap();
        model.save(&path, "abc").unwrap();
        let loaded = GecoModel::load(&path, "abc").unwrap();
        let x = ramp_input(100, 16);
        assert_eq!(model.embed_clip(x.view()).unwrap(), loaded.embed_clip(x.view()).unwrap());
        assert!(GecoModel::load(&path, "other").is_err());
    }
}
