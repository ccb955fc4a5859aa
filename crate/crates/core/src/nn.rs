//! Small neural-network toolkit on top of candle tensors: a parameter store
//! with seeded initialisation, the layers used by the PAE and the extractor,
//! and SGD with momentum.
//!
//! candle's CPU RNG cannot be seeded, so every parameter is initialised here
//! from a caller-supplied RNG.

use std::collections::{BTreeMap, HashMap};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};
use crate::kernels::{channel_moments, BatchNormTrain, Im2Col, Patches};

/// Named trainable parameters plus non-trainable buffers (batch-norm
/// running statistics).
#[derive(Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn device(&self) -> Device {
        Device::Cpu
    }

    fn insert(map: &mut BTreeMap<String, Var>, name: &str, data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        if map.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &Device::Cpu)?)?;
        let tensor = var.as_tensor().clone();
        map.insert(name.to_string(), var);
        Ok(tensor)
    }

    pub fn param(&mut self, name: &str, data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        Self::insert(&mut self.params, name, data, shape)
    }

    pub fn buffer(&mut self, name: &str, data: Vec<f32>, shape: &[usize]) -> Result<Var> {
        Self::insert(&mut self.buffers, name, data, shape)?;
        Ok(self.buffers[name].clone())
    }

    pub fn uniform<R: Rng + ?Sized>(&mut self, rng: &mut R, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect();
        self.param(name, data, shape)
    }

    pub fn normal<R: Rng + ?Sized>(&mut self, rng: &mut R, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
        self.param(name, data, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<Tensor> {
        let n = shape.iter().product();
        self.param(name, vec![value; n], shape)
    }

    pub fn trainable(&self) -> Vec<Var> {
        self.params.values().cloned().collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// All parameters and buffers by name, for checkpointing.
    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .chain(&self.buffers)
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every parameter and buffer from `tensors`, which must hold
    /// exactly the same names and shapes.
    pub fn load(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        let expected = self.params.len() + self.buffers.len();
        if tensors.len() != expected {
            return Err(Error::invalid(format!(
                "checkpoint holds {} tensors, model expects {expected}",
                tensors.len()
            )));
        }
        for (name, var) in self.params.iter().chain(&self.buffers) {
            let src = tensors
                .get(name)
                .ok_or_else(|| Error::invalid(format!("checkpoint is missing `{name}`")))?;
            if src.dims() != var.dims() {
                return Err(Error::invalid(format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(DType::F32)?)?;
        }
        Ok(())
    }
}

/// Fully connected layer applied over the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    /// PyTorch-style uniform initialisation with bound `1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Linear {
            weight: store.uniform(rng, &format!("{name}.weight"), &[fan_out, fan_in], bound)?,
            bias: store.uniform(rng, &format!("{name}.bias"), &[fan_out], bound)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let fan_in = *dims.last().ok_or_else(|| Error::invalid("linear input is a scalar"))?;
        let lead: usize = dims[..dims.len() - 1].iter().product();
        let y = x
            .reshape((lead, fan_in))?
            .matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-empty") = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.constant(&format!("{name}.weight"), &[dim], 1.0)?,
            beta: store.constant(&format!("{name}.bias"), &[dim], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Multi-head self-attention over `[batch, seq, dim]`.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    qkv: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("width {dim} is not divisible by {heads} heads")));
        }
        Ok(SelfAttention {
            qkv: Linear::new(store, rng, &format!("{name}.qkv"), dim, 3 * dim)?,
            out: Linear::new(store, rng, &format!("{name}.out"), dim, dim)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, dim) = x.dims3()?;
        let head_dim = dim / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, t, 3, self.heads, head_dim))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?)? / (head_dim as f64).sqrt())?;
        let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let attended = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, t, dim))?;
        self.out.forward(&attended)
    }
}

/// Pre-norm transformer block: attention and a GELU feed-forward, each with
/// a residual connection.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    norm1: LayerNorm,
    attn: SelfAttention,
    norm2: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        ff_mult: usize,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            attn: SelfAttention::new(store, rng, &format!("{name}.attn"), dim, heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            ff_in: Linear::new(store, rng, &format!("{name}.ff_in"), dim, ff_mult * dim)?,
            ff_out: Linear::new(store, rng, &format!("{name}.ff_out"), ff_mult * dim, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        let ff = self.ff_out.forward(&self.ff_in.forward(&self.norm2.forward(&x)?)?.gelu_erf()?)?;
        Ok((x + ff)?)
    }
}

/// 2-D convolution without bias (followed by batch norm everywhere it is
/// used).
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// He-normal initialisation in fan-out mode.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let std = (2.0 / (c_out * kernel * kernel) as f64).sqrt();
        Ok(Conv2d {
            weight: store.normal(rng, &format!("{name}.weight"), &[c_out, c_in, kernel, kernel], std)?,
            stride,
            padding,
        })
    }

    /// Convolution as patch extraction plus one batched matrix product.
    ///
    /// candle's native CPU convolution is slow in the backward pass and
    /// derives the input gradient of strided convolutions from the height
    /// alone, which is wrong when height and width differ in parity.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (c_out, _, k, _) = self.weight.dims4()?;
        let geometry = Patches {
            b,
            c,
            h,
            w,
            k,
            stride: self.stride,
            pad: self.padding,
        };
        let (oh, ow) = geometry.out_hw();
        let cols = x.contiguous()?.apply_op1(Im2Col(geometry))?;
        let weight = self.weight.reshape((c_out, c * k * k))?;
        Ok(weight.broadcast_matmul(&cols)?.reshape((b, c_out, oh, ow))?)
    }
}

/// Batch normalisation over `[batch, channels, h, w]`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: store.constant(&format!("{name}.weight"), &[channels], 1.0)?,
            beta: store.constant(&format!("{name}.bias"), &[channels], 0.0)?,
            running_mean: store.buffer(&format!("{name}.running_mean"), vec![0.0; channels], &[channels])?,
            running_var: store.buffer(&format!("{name}.running_var"), vec![1.0; channels], &[channels])?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// Batch statistics (and a running-stat update) when `train`, running
    /// statistics otherwise.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if train {
            let x = x.contiguous()?;
            let data = x.detach().flatten_all()?.to_vec1::<f32>()?;
            let moments = channel_moments(&data, b, c, h * w);
            let n = (b * h * w) as f64;
            let correction = n / (n - 1.0).max(1.0);
            let m = self.momentum;
            let batch_mean: Vec<f32> = moments.iter().map(|&(mean, _)| mean as f32).collect();
            let batch_var: Vec<f32> = moments.iter().map(|&(_, var)| (var * correction) as f32).collect();
            let device = x.device();
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                + (Tensor::from_vec(batch_mean, c, device)? * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                + (Tensor::from_vec(batch_var, c, device)? * m)?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            return Ok(x.apply_op3(&self.gamma, &self.beta, BatchNormTrain { eps: self.eps })?);
        }
        let mean = self.running_mean.as_tensor().reshape((1, c, 1, 1))?;
        let var = self.running_var.as_tensor().reshape((1, c, 1, 1))?;
        let normed = x.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

/// SGD with heavy-ball momentum and L2 weight decay, matching the
/// conventional `v = mu * v + (g + wd * p); p -= lr * v` update.
pub struct SgdMomentum {
    vars: Vec<Var>,
    velocity: Vec<Option<Tensor>>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
}

impl SgdMomentum {
    pub fn new(vars: Vec<Var>, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        let velocity = vec![None; vars.len()];
        SgdMomentum {
            vars,
            velocity,
            lr,
            momentum,
            weight_decay,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        for (var, velocity) in self.vars.iter().zip(self.velocity.iter_mut()) {
            let Some(grad) = grads.get(var) else { continue };
            // Gradients keep their autograd history; the velocity must not.
            let grad = grad.detach();
            let grad = if self.weight_decay != 0.0 {
                (grad + (var.as_tensor().detach() * self.weight_decay)?)?
            } else {
                grad
            };
            let v = match velocity.take() {
                Some(prev) => ((prev * self.momentum)? + grad)?,
                None => grad,
            };
            var.set(&(var.as_tensor().detach() - (&v * self.lr)?)?)?;
            *velocity = Some(v);
        }
        Ok(())
    }
}

/// L2-normalises the rows of a `[n, d]` tensor.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&(norm + 1e-12)?)?)
}
