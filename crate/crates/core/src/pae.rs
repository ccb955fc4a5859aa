//! Predictive autoencoder: transformer encoder, MLP bottleneck and
//! transformer decoder that predict a masked frame of a short spectrogram
//! window from its neighbours.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, HASH_KEY};
use crate::data::MachineType;
use crate::losses::{masked_mse, masked_mse_per_window};
use crate::nn::{LayerNorm, Linear, ParamStore, TransformerBlock};
use crate::schedule::StepLr;
use crate::{Error, Result};

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PaeArch {
    /// Frames per window.
    pub window: usize,
    pub n_mels: usize,
    pub enc_width: usize,
    pub enc_blocks: usize,
    pub dec_width: usize,
    pub dec_blocks: usize,
    pub bottleneck: usize,
    pub heads: usize,
    pub ff_mult: usize,
}

impl Default for PaeArch {
    fn default() -> Self {
        PaeArch {
            window: 5,
            n_mels: 128,
            enc_width: 512,
            enc_blocks: 2,
            dec_width: 256,
            dec_blocks: 2,
            bottleneck: 64,
            heads: 4,
            ff_mult: 4,
        }
    }
}

impl PaeArch {
    /// One block per side, width 32: the desk-scale configuration.
    pub fn tiny(n_mels: usize) -> Self {
        PaeArch {
            n_mels,
            enc_width: 32,
            enc_blocks: 1,
            dec_width: 32,
            dec_blocks: 1,
            bottleneck: 16,
            ..PaeArch::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: StepLr,
}

impl Default for PaeTrainConfig {
    fn default() -> Self {
        PaeTrainConfig {
            epochs: 60,
            batch_size: 512,
            lr: StepLr {
                boundaries: vec![30],
                values: vec![1e-3, 1e-4],
            },
        }
    }
}

impl PaeTrainConfig {
    /// Same schedule shape compressed to `epochs`.
    pub fn scaled(&self, epochs: usize) -> Self {
        PaeTrainConfig {
            epochs,
            batch_size: self.batch_size,
            lr: self.lr.scaled(self.epochs, epochs),
        }
    }
}

/// A window with one or more frames replaced by the mask token.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedWindow {
    /// `[w, n_mels]` original frames.
    pub x: Array2<f32>,
    /// `[w, n_mels]`, ones on masked frames.
    pub mask: Array2<f32>,
    /// `x` with masked frames replaced by the token.
    pub x_masked: Array2<f32>,
}

/// Masks frame `target` of `x` with `mask_token`.
pub fn mask_window(x: ArrayView2<f32>, target: usize, mask_token: &[f32]) -> Result<MaskedWindow> {
    let (w, n_mels) = x.dim();
    if target >= w {
        return Err(Error::invalid(format!("mask index {target} outside window of {w} frames")));
    }
    if mask_token.len() != n_mels {
        return Err(Error::invalid(format!(
            "mask token has {} entries, window has {n_mels} mels",
            mask_token.len()
        )));
    }
    let mut mask = Array2::zeros((w, n_mels));
    mask.row_mut(target).fill(1.0);
    let mut x_masked = x.to_owned();
    x_masked
        .row_mut(target)
        .iter_mut()
        .zip(mask_token)
        .for_each(|(v, &t)| *v = t);
    Ok(MaskedWindow {
        x: x.to_owned(),
        mask,
        x_masked,
    })
}

/// Anything that predicts one masked frame per window. Implemented by
/// [`PaeModel`]; tests substitute simple oracles.
pub trait FramePredictor {
    /// `windows` is `[b, w, n_mels]` of original frames; returns `[b, n_mels]`
    /// predictions of frame `targets[i]` of window `i`.
    fn predict_frames(&self, windows: &Tensor, targets: &[usize]) -> Result<Tensor>;
}

fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let values = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// `[b, w, 1]` frame mask with a one at `targets[i]` in row `i`.
fn frame_mask(targets: &[usize], window: usize) -> Result<Tensor> {
    let mut m = vec![0f32; targets.len() * window];
    for (i, &t) in targets.iter().enumerate() {
        if t >= window {
            return Err(Error::invalid(format!("mask index {t} outside window of {window} frames")));
        }
        m[i * window + t] = 1.0;
    }
    Ok(Tensor::from_vec(m, (targets.len(), window, 1), &Device::Cpu)?)
}

pub struct PaeModel {
    arch: PaeArch,
    machine_type: MachineType,
    store: ParamStore,
    input_mean: Var,
    input_std: Var,
    mask_token: Tensor,
    in_proj: Linear,
    enc_pos: Tensor,
    encoder: Vec<TransformerBlock>,
    enc_norm: LayerNorm,
    squeeze: Linear,
    expand: Linear,
    dec_pos: Tensor,
    decoder: Vec<TransformerBlock>,
    dec_norm: LayerNorm,
    out_proj: Linear,
}

impl PaeModel {
    pub fn new(arch: PaeArch, machine_type: MachineType, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let a = &arch;
        // Fixed input standardisation; set from training data, kept in the
        // checkpoint, never trained.
        let input_mean = store.buffer("input.mean", vec![0.0], &[1])?;
        let input_std = store.buffer("input.std", vec![1.0], &[1])?;
        let mask_token = store.normal(&mut rng, "mask_token", &[a.n_mels], 0.02)?;
        let in_proj = Linear::new(&mut store, &mut rng, "in_proj", a.n_mels, a.enc_width)?;
        let enc_pos = store.normal(&mut rng, "enc_pos", &[a.window, a.enc_width], 0.02)?;
        let encoder = (0..a.enc_blocks)
            .map(|i| TransformerBlock::new(&mut store, &mut rng, &format!("enc.{i}"), a.enc_width, a.heads, a.ff_mult))
            .collect::<Result<Vec<_>>>()?;
        let enc_norm = LayerNorm::new(&mut store, "enc_norm", a.enc_width)?;
        let squeeze = Linear::new(&mut store, &mut rng, "bottleneck.squeeze", a.enc_width, a.bottleneck)?;
        let expand = Linear::new(&mut store, &mut rng, "bottleneck.expand", a.bottleneck, a.dec_width)?;
        let dec_pos = store.normal(&mut rng, "dec_pos", &[a.window, a.dec_width], 0.02)?;
        let decoder = (0..a.dec_blocks)
            .map(|i| TransformerBlock::new(&mut store, &mut rng, &format!("dec.{i}"), a.dec_width, a.heads, a.ff_mult))
            .collect::<Result<Vec<_>>>()?;
        let dec_norm = LayerNorm::new(&mut store, "dec_norm", a.dec_width)?;
        let out_proj = Linear::new(&mut store, &mut rng, "out_proj", a.dec_width, a.n_mels)?;
        Ok(PaeModel {
            arch,
            machine_type,
            store,
            input_mean,
            input_std,
            mask_token,
            in_proj,
            enc_pos,
            encoder,
            enc_norm,
            squeeze,
            expand,
            dec_pos,
            decoder,
            dec_norm,
            out_proj,
        })
    }

    pub fn arch(&self) -> &PaeArch {
        &self.arch
    }

    pub fn machine_type(&self) -> &MachineType {
        &self.machine_type
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    fn stats(&self) -> Result<(f32, f32)> {
        Ok((
            self.input_mean.to_vec1::<f32>()?[0],
            self.input_std.to_vec1::<f32>()?[0],
        ))
    }

    fn set_stats(&self, mean: f32, std: f32) -> Result<()> {
        self.input_mean.set(&Tensor::new(&[mean], &Device::Cpu)?)?;
        self.input_std.set(&Tensor::new(&[std.max(1e-6)], &Device::Cpu)?)?;
        Ok(())
    }

    /// The mask token in log-Mel units.
    pub fn mask_token(&self) -> Result<Vec<f32>> {
        let (mean, std) = self.stats()?;
        Ok(self
            .mask_token
            .to_vec1::<f32>()?
            .into_iter()
            .map(|t| t * std + mean)
            .collect())
    }

    fn standardize(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x
            .broadcast_sub(self.input_mean.as_tensor())?
            .broadcast_div(self.input_std.as_tensor())?)
    }

    fn core(&self, x_norm: &Tensor) -> Result<Tensor> {
        let mut h = self.in_proj.forward(x_norm)?.broadcast_add(&self.enc_pos)?;
        for block in &self.encoder {
            h = block.forward(&h)?;
        }
        let h = self.enc_norm.forward(&h)?;
        let h = self.expand.forward(&self.squeeze.forward(&h)?.gelu_erf()?)?;
        let mut h = h.broadcast_add(&self.dec_pos)?;
        for block in &self.decoder {
            h = block.forward(&h)?;
        }
        let y = self.out_proj.forward(&self.dec_norm.forward(&h)?)?;
        Ok(y
            .broadcast_mul(self.input_std.as_tensor())?
            .broadcast_add(self.input_mean.as_tensor())?)
    }

    /// `D(L(E(x_m)))` for an already-masked input `[b, w, n_mels]` in
    /// log-Mel units.
    pub fn forward(&self, x_masked: &Tensor) -> Result<Tensor> {
        self.check_shape(x_masked)?;
        ensure_finite(x_masked, "PAE input")?;
        self.core(&self.standardize(x_masked)?)
    }

    /// Substitutes the learnable mask token on the frames selected by
    /// `frame_mask` (`[b, w, 1]`) and runs the model. Gradients reach the
    /// token through this path.
    pub fn forward_masked(&self, windows: &Tensor, frame_mask: &Tensor) -> Result<Tensor> {
        self.check_shape(windows)?;
        let x = self.standardize(windows)?;
        let keep = (frame_mask.ones_like()? - frame_mask)?;
        let token = self.mask_token.reshape((1, 1, self.arch.n_mels))?;
        let x_masked = (x.broadcast_mul(&keep)? + frame_mask.broadcast_mul(&token)?)?;
        self.core(&x_masked)
    }

    fn check_shape(&self, x: &Tensor) -> Result<()> {
        let (_, w, m) = x.dims3()?;
        if w != self.arch.window || m != self.arch.n_mels {
            return Err(Error::invalid(format!(
                "PAE expects [b, {}, {}], got {:?}",
                self.arch.window,
                self.arch.n_mels,
                x.dims()
            )));
        }
        Ok(())
    }

    /// Masked-MSE objective for a batch of windows with one masked frame
    /// each.
    pub fn batch_loss(&self, windows: &Tensor, targets: &[usize]) -> Result<Tensor> {
        let fmask = frame_mask(targets, self.arch.window)?;
        let recon = self.forward_masked(windows, &fmask)?;
        let mask = fmask.broadcast_as(windows.shape())?.contiguous()?;
        masked_mse(windows, &recon, &mask)
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let metadata = BTreeMap::from([
            (HASH_KEY.to_string(), config_hash.to_string()),
            ("machine_type".to_string(), self.machine_type.to_string()),
            ("arch".to_string(), serde_json::to_string(&self.arch)?),
        ]);
        save_checkpoint(path, &self.store.named_tensors(), &metadata)
    }

    /// Loads a checkpoint, refusing it unless it was written under
    /// `expected_hash`.
    pub fn load(path: &Path, expected_hash: &str) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        ckpt.verify_hash(path, expected_hash)?;
        let field = |key: &str| {
            ckpt.metadata.get(key).cloned().ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                reason: format!("checkpoint metadata lacks `{key}`"),
            })
        };
        let arch: PaeArch = serde_json::from_str(&field("arch")?)?;
        let model = PaeModel::new(arch, MachineType::new(&field("machine_type")?), 0)?;
        model.store.load(&ckpt.tensors)?;
        Ok(model)
    }
}

impl FramePredictor for PaeModel {
    fn predict_frames(&self, windows: &Tensor, targets: &[usize]) -> Result<Tensor> {
        ensure_finite(windows, "PAE input")?;
        let fmask = frame_mask(targets, self.arch.window)?;
        let recon = self.forward_masked(windows, &fmask)?;
        Ok(recon.broadcast_mul(&fmask)?.sum(1)?)
    }
}

/// Per-epoch PAE training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaeEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Stacks `[w, n_mels]` windows starting at `starts` of each clip into one
/// `[n, w, n_mels]` tensor.
fn stack_windows(clips: &[ArrayView2<f32>], index: &[(usize, usize)], window: usize) -> Result<Tensor> {
    let n_mels = clips.first().map(|c| c.ncols()).unwrap_or(0);
    let mut flat: Vec<f32> = Vec::with_capacity(index.len() * window * n_mels);
    for &(clip, start) in index {
        for t in start..start + window {
            flat.extend(clips[clip].row(t).iter());
        }
    }
    Ok(Tensor::from_vec(flat, (index.len(), window, n_mels), &Device::Cpu)?)
}

/// Trains one PAE on the normal training clips of a single machine type.
///
/// Each epoch walks every clip in non-overlapping windows, masks one
/// uniformly random frame per window, and shuffles the windows into batches.
pub fn train_pae(
    clips: &[ArrayView2<f32>],
    machine_type: MachineType,
    arch: PaeArch,
    config: &PaeTrainConfig,
    seed: u64,
) -> Result<(PaeModel, Vec<PaeEpoch>)> {
    if clips.is_empty() {
        return Err(Error::invalid(format!("no training clips for machine type {machine_type}")));
    }
    config.lr.validate()?;
    if config.batch_size == 0 {
        return Err(Error::Config("PAE batch size must be positive".into()));
    }
    let w = arch.window;
    let mut windows = Vec::new();
    for (c, clip) in clips.iter().enumerate() {
        if clip.ncols() != arch.n_mels {
            return Err(Error::invalid(format!(
                "clip has {} mels, PAE expects {}",
                clip.ncols(),
                arch.n_mels
            )));
        }
        windows.extend((0..clip.nrows() / w).map(|k| (c, k * w)));
    }
    if windows.is_empty() {
        return Err(Error::invalid(format!("clips of {machine_type} are shorter than one window")));
    }
    let all = stack_windows(clips, &windows, w)?;
    let model = PaeModel::new(arch, machine_type, seed)?;
    let stats = crate::features::FeatureStats::from_spectrograms(clips.iter().copied())?;
    model.set_stats(stats.mean, stats.std)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0000_0000_0001);
    let mut opt = AdamW::new(
        model.store.trainable(),
        ParamsAdamW {
            lr: config.lr.at(0),
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        },
    )?;
    let mut log = Vec::with_capacity(config.epochs);
    let mut order: Vec<u32> = (0..windows.len() as u32).collect();
    for epoch in 0..config.epochs {
        let lr = config.lr.at(epoch);
        opt.set_learning_rate(lr);
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0f64, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let idx = Tensor::new(chunk, &Device::Cpu)?;
            let batch = all.index_select(&idx, 0)?;
            let targets: Vec<usize> = (0..chunk.len()).map(|_| rng.random_range(0..w)).collect();
            let loss = model.batch_loss(&batch, &targets)?;
            let value = loss.to_scalar::<f32>()? as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("PAE loss at epoch {epoch}")));
            }
            opt.backward_step(&loss)?;
            total += value * chunk.len() as f64;
            count += chunk.len();
        }
        let loss = total / count as f64;
        log::debug!("pae {} epoch {epoch}: loss {loss:.5} lr {lr}", model.machine_type);
        log.push(PaeEpoch { epoch, loss, lr });
    }
    Ok((model, log))
}

/// Frame-level anomaly score: slide a window with stride 1, mask frame
/// `target` (the centre by default), and average the masked MSE over all
/// window positions.
pub fn frame_anomaly_score(model: &PaeModel, spec: ArrayView2<f32>) -> Result<f64> {
    frame_anomaly_score_at(model, spec, model.arch.window / 2)
}

pub fn frame_anomaly_score_at(model: &PaeModel, spec: ArrayView2<f32>, target: usize) -> Result<f64> {
    let w = model.arch.window;
    let (n_frames, n_mels) = spec.dim();
    if n_frames < w {
        return Err(Error::invalid(format!(
            "spectrogram has {n_frames} frames, scoring needs at least {w}"
        )));
    }
    if n_mels != model.arch.n_mels {
        return Err(Error::invalid(format!(
            "spectrogram has {n_mels} mels, PAE expects {}",
            model.arch.n_mels
        )));
    }
    let positions: Vec<(usize, usize)> = (0..=n_frames - w).map(|s| (0, s)).collect();
    let clips = [spec];
    let mut sum = 0.0f64;
    for chunk in positions.chunks(1024) {
        let windows = stack_windows(&clips, chunk, w)?;
        ensure_finite(&windows, "spectrogram")?;
        let targets = vec![target; chunk.len()];
        let fmask = frame_mask(&targets, w)?;
        let recon = model.forward_masked(&windows, &fmask)?;
        let mask = fmask.broadcast_as(windows.shape())?.contiguous()?;
        let per_window = masked_mse_per_window(&windows, &recon, &mask)?.to_vec1::<f32>()?;
        sum += per_window.iter().map(|&v| v as f64).sum::<f64>();
    }
    Ok(sum / positions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn tiny() -> PaeModel {
        PaeModel::new(PaeArch::tiny(8), MachineType::new("SynthA"), 1).unwrap()
    }

    #[test]
    fn mask_window_marks_one_frame() {
        let x = Array2::from_shape_fn((5, 6), |(t, m)| (t * 6 + m) as f32);
        let token = vec![-1.0; 6];
        let mw = mask_window(x.view(), 2, &token).unwrap();
        let row_sums: Vec<f32> = mw.mask.rows().into_iter().map(|r| r.sum()).collect();
        assert_eq!(row_sums, vec![0.0, 0.0, 6.0, 0.0, 0.0]);
        assert!(mw.x_masked.row(2).iter().all(|&v| v == -1.0));
        for t in [0, 1, 3, 4] {
            assert_eq!(mw.x_masked.row(t), x.row(t));
        }
        assert_eq!(mw, mask_window(x.view(), 2, &token).unwrap());
        assert!(mask_window(x.view(), 5, &token).is_err());
    }

    #[test]
    fn mask_token_equal_to_frame_is_fixed_point() {
        let x = Array2::from_shape_fn((5, 4), |(t, m)| (t + m) as f32 * 0.3);
        let token: Vec<f32> = x.row(2).to_vec();
        let mw = mask_window(x.view(), 2, &token).unwrap();
        assert_eq!(mw.x_masked, x);
    }

    #[test]
    fn forward_preserves_shape_and_is_finite() {
        for n_mels in [8, 13] {
            let model = PaeModel::new(PaeArch::tiny(n_mels), MachineType::new("T"), 0).unwrap();
            let x = Tensor::randn(0f32, 1.0, (3, 5, n_mels), &Device::Cpu).unwrap();
            let y = model.forward(&x).unwrap();
            assert_eq!(y.dims(), x.dims());
            ensure_finite(&y, "out").unwrap();
            let y2 = model.forward(&x).unwrap();
            assert_eq!(y.to_vec3::<f32>().unwrap(), y2.to_vec3::<f32>().unwrap());
        }
    }

    #[test]
    fn forward_rejects_non_finite_input() {
        let model = tiny();
        let mut v = vec![0f32; 5 * 8];
        v[3] = f32::NAN;
        let x = Tensor::from_vec(v, (1, 5, 8), &Device::Cpu).unwrap();
        assert!(matches!(model.forward(&x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn forward_masked_matches_explicit_masking() {
        let model = tiny();
        let x = Array2::from_shape_fn((5, 8), |(t, m)| ((t * 8 + m) as f32).sin());
        let token = model.mask_token().unwrap();
        let mw = mask_window(x.view(), 3, &token).unwrap();
        let xm = Tensor::from_vec(mw.x_masked.iter().copied().collect::<Vec<_>>(), (1, 5, 8), &Device::Cpu).unwrap();
        let direct = model.forward(&xm).unwrap();
        let windows = Tensor::from_vec(x.iter().copied().collect::<Vec<_>>(), (1, 5, 8), &Device::Cpu).unwrap();
        let via_mask = model.forward_masked(&windows, &frame_mask(&[3], 5).unwrap()).unwrap();
        let diff = (direct - via_mask).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-4, "diff {diff}");
    }

    fn constant_clips(n: usize) -> Vec<Array2<f32>> {
        (0..n)
            .map(|i| Array2::from_shape_fn((40, 8), |(_, m)| -20.0 + m as f32 + (i % 3) as f32))
            .collect()
    }

    #[test]
    fn training_reduces_masked_error() {
        let clips = constant_clips(12);
        let views: Vec<_> = clips.iter().map(|c| c.view()).collect();
        let untrained = PaeModel::new(PaeArch::tiny(8), MachineType::new("T"), 5).unwrap();
        untrained.set_stats(-16.5, 3.0).unwrap();
        let before = frame_anomaly_score(&untrained, views[0]).unwrap();
        let config = PaeTrainConfig {
            epochs: 50,
            batch_size: 32,
            lr: StepLr::new(vec![40], vec![3e-3, 1e-3]).unwrap(),
        };
        let (model, log) = train_pae(&views, MachineType::new("T"), PaeArch::tiny(8), &config, 5).unwrap();
        let after = frame_anomaly_score(&model, views[0]).unwrap();
        assert!(after < before, "after {after} before {before}");
        assert!(log.last().unwrap().loss < log[0].loss);

        // The token participates in the graph.
        let windows = stack_windows(&views, &[(0, 0), (1, 5)], 5).unwrap();
        let loss = model.batch_loss(&windows, &[1, 3]).unwrap();
        let grads = loss.backward().unwrap();
        let g = grads.get(&model.mask_token).expect("mask token gradient");
        let norm = g.sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(norm > 0.0);
    }

    #[test]
    fn training_is_deterministic() {
        let clips = constant_clips(4);
        let views: Vec<_> = clips.iter().map(|c| c.view()).collect();
        let config = PaeTrainConfig {
            epochs: 3,
            batch_size: 8,
            lr: StepLr::new(vec![2], vec![1e-3, 1e-4]).unwrap(),
        };
        let run = || train_pae(&views, MachineType::new("T"), PaeArch::tiny(8), &config, 11).unwrap().1;
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_clip_set_is_rejected() {
        let config = PaeTrainConfig::default();
        assert!(train_pae(&[], MachineType::new("T"), PaeArch::tiny(8), &config, 0).is_err());
    }

    #[test]
    fn five_frame_clip_scores_its_single_window() {
        let model = tiny();
        let x = Array2::from_shape_fn((5, 8), |(t, m)| (t as f32 - m as f32) * 0.1);
        let score = frame_anomaly_score(&model, x.view()).unwrap();
        let windows = Tensor::from_vec(x.iter().copied().collect::<Vec<_>>(), (1, 5, 8), &Device::Cpu).unwrap();
        let direct = model.batch_loss(&windows, &[2]).unwrap().to_scalar::<f32>().unwrap() as f64;
        assert!((score - direct).abs() < 1e-6 * direct.max(1.0));
        let short = Array2::<f32>::zeros((4, 8));
        assert!(frame_anomaly_score(&model, short.view()).is_err());
    }

    #[test]
    fn checkpoint_round_trip_verifies_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pae.safetensors");
        let model = tiny();
        model.set_stats(-30.0, 12.0).unwrap();
        model.save(&path, "h1").unwrap();
        let loaded = PaeModel::load(&path, "h1").unwrap();
        assert_eq!(loaded.machine_type().as_str(), "SynthA");
        let x = Tensor::randn(0f32, 1.0, (2, 5, 8), &Device::Cpu).unwrap();
        assert_eq!(
            model.forward(&x).unwrap().to_vec3::<f32>().unwrap(),
            loaded.forward(&x).unwrap().to_vec3::<f32>().unwrap()
        );
        assert!(matches!(PaeModel::load(&path, "h2"), Err(Error::HashMismatch { .. })));
    }
}
