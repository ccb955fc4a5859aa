//! CPU kernels with hand-written gradients for the convolutional extractor:
//! patch extraction (im2col) and its adjoint, and training-mode batch
//! normalisation.

use candle_core::{CpuStorage, CustomOp1, CustomOp3, Layout, Shape, Tensor};
use rayon::prelude::*;

fn f32_slice<'a>(storage: &'a CpuStorage, layout: &Layout, op: &str) -> candle_core::Result<&'a [f32]> {
    let data = match storage {
        CpuStorage::F32(v) => v.as_slice(),
        _ => candle_core::bail!("{op} supports f32 only"),
    };
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("{op} needs a contiguous input"),
    }
}

/// Geometry shared by [`Im2Col`] and [`Col2Im`].
#[derive(Debug, Clone, Copy)]
pub(crate) struct Patches {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Patches {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Calls `f(col_offset, input_offset)` for every in-bounds tap of
    /// channel plane `(b, c)`; offsets are relative to that plane.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (oh, ow) = self.out_hw();
        for di in 0..self.k {
            for dj in 0..self.k {
                let row = (di * self.k + dj) * oh * ow;
                for oy in 0..oh {
                    let y = (oy * self.stride + di) as isize - self.pad as isize;
                    if y < 0 || y >= self.h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let x = (ox * self.stride + dj) as isize - self.pad as isize;
                        if x < 0 || x >= self.w as isize {
                            continue;
                        }
                        f(row + oy * ow + ox, y as usize * self.w + x as usize);
                    }
                }
            }
        }
    }
}

/// `[b, c, h, w]` -> `[b, c*k*k, oh*ow]`, zero outside the padded input.
pub(crate) struct Im2Col(pub Patches);

/// Adjoint of [`Im2Col`]: scatters-and-sums columns back onto the input.
pub(crate) struct Col2Im(pub Patches);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let x = f32_slice(storage, layout, self.name())?;
        let (oh, ow) = g.out_hw();
        let plane_out = g.k * g.k * oh * ow;
        let plane_in = g.h * g.w;
        let mut out = vec![0f32; g.b * g.c * plane_out];
        out.par_chunks_mut(plane_out).enumerate().for_each(|(bc, dst)| {
            let src = &x[bc * plane_in..(bc + 1) * plane_in];
            g.for_each_tap(|o, i| dst[o] = src[i]);
        });
        Ok((CpuStorage::F32(out), Shape::from((g.b, g.c * g.k * g.k, oh * ow))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let cols = f32_slice(storage, layout, self.name())?;
        let (oh, ow) = g.out_hw();
        let plane_cols = g.k * g.k * oh * ow;
        let plane = g.h * g.w;
        let mut out = vec![0f32; g.b * g.c * plane];
        out.par_chunks_mut(plane).enumerate().for_each(|(bc, dst)| {
            let src = &cols[bc * plane_cols..(bc + 1) * plane_cols];
            g.for_each_tap(|o, i| dst[i] += src[o]);
        });
        Ok((CpuStorage::F32(out), Shape::from((g.b, g.c, g.h, g.w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Im2Col(self.0))?))
    }
}

/// Per-channel mean and biased variance of `[b, c, plane]` data.
pub(crate) fn channel_moments(x: &[f32], b: usize, c: usize, plane: usize) -> Vec<(f64, f64)> {
    (0..c)
        .into_par_iter()
        .map(|ch| {
            let (mut s, mut ss) = (0f64, 0f64);
            for bi in 0..b {
                for &v in &x[(bi * c + ch) * plane..(bi * c + ch + 1) * plane] {
                    s += v as f64;
                    ss += v as f64 * v as f64;
                }
            }
            let n = (b * plane) as f64;
            let mean = s / n;
            (mean, (ss / n - mean * mean).max(0.0))
        })
        .collect()
}

/// Training-mode batch normalisation of `[b, c, h, w]` with affine
/// `gamma`, `beta` of shape `[c]`.
pub(crate) struct BatchNormTrain {
    pub eps: f64,
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = f32_slice(s1, l1, self.name())?;
        let gamma = f32_slice(s2, l2, self.name())?;
        let beta = f32_slice(s3, l3, self.name())?;
        let (b, c, h, w) = l1.shape().dims4()?;
        let plane = h * w;
        let moments = channel_moments(x, b, c, plane);
        let mut out = vec![0f32; x.len()];
        out.par_chunks_mut(plane).enumerate().for_each(|(bc, dst)| {
            let ch = bc % c;
            let (mean, var) = moments[ch];
            let scale = gamma[ch] as f64 / (var + self.eps).sqrt();
            let shift = beta[ch] as f64 - mean * scale;
            for (d, &v) in dst.iter_mut().zip(&x[bc * plane..(bc + 1) * plane]) {
                *d = (v as f64 * scale + shift) as f32;
            }
        });
        Ok((CpuStorage::F32(out), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (b, c, h, w) = x.dims4()?;
        let plane = h * w;
        let n = (b * plane) as f64;
        let xv = x.flatten_all()?.to_vec1::<f32>()?;
        let gv = grad.flatten_all()?.to_vec1::<f32>()?;
        let gamma_v = gamma.to_vec1::<f32>()?;
        let moments = channel_moments(&xv, b, c, plane);
        // Per channel: sum(g) and sum(g * xhat).
        let sums: Vec<(f64, f64)> = (0..c)
            .into_par_iter()
            .map(|ch| {
                let (mean, var) = moments[ch];
                let inv = 1.0 / (var + self.eps).sqrt();
                let (mut sg, mut sgx) = (0f64, 0f64);
                for bi in 0..b {
                    let r = (bi * c + ch) * plane..(bi * c + ch + 1) * plane;
                    for (&g, &v) in gv[r.clone()].iter().zip(&xv[r]) {
                        sg += g as f64;
                        sgx += g as f64 * (v as f64 - mean) * inv;
                    }
                }
                (sg, sgx)
            })
            .collect();
        let mut dx = vec![0f32; xv.len()];
        dx.par_chunks_mut(plane).enumerate().for_each(|(bc, dst)| {
            let ch = bc % c;
            let (mean, var) = moments[ch];
            let inv = 1.0 / (var + self.eps).sqrt();
            let (sg, sgx) = sums[ch];
            let k = gamma_v[ch] as f64 * inv / n;
            let r = bc * plane..(bc + 1) * plane;
            for ((d, &g), &v) in dst.iter_mut().zip(&gv[r.clone()]).zip(&xv[r]) {
                let xhat = (v as f64 - mean) * inv;
                *d = (k * (n * g as f64 - sg - xhat * sgx)) as f32;
            }
        });
        let device = x.device();
        let dgamma: Vec<f32> = sums.iter().map(|&(_, sgx)| sgx as f32).collect();
        let dbeta: Vec<f32> = sums.iter().map(|&(sg, _)| sg as f32).collect();
        Ok((
            Some(Tensor::from_vec(dx, (b, c, h, w), device)?),
            Some(Tensor::from_vec(dgamma, c, device)?),
            Some(Tensor::from_vec(dbeta, c, device)?),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn geometry() -> Patches {
        Patches {
            b: 2,
            c: 3,
            h: 5,
            w: 4,
            k: 3,
            stride: 2,
            pad: 1,
        }
    }

    fn ramp(n: usize, scale: f32) -> Vec<f32> {
        (0..n).map(|i| ((i * 37 % 101) as f32 - 50.0) * scale).collect()
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = geometry();
        let (oh, ow) = g.out_hw();
        let x = Tensor::from_vec(ramp(2 * 3 * 5 * 4, 0.01), (2, 3, 5, 4), &Device::Cpu).unwrap();
        let y = Tensor::from_vec(ramp(2 * 27 * oh * ow, 0.02), (2, 27, oh * ow), &Device::Cpu).unwrap();
        let lhs = (x.apply_op1_no_bwd(&Im2Col(g)).unwrap() * &y).unwrap().sum_all().unwrap();
        let rhs = (&x * y.apply_op1_no_bwd(&Col2Im(g)).unwrap()).unwrap().sum_all().unwrap();
        let (l, r) = (lhs.to_scalar::<f32>().unwrap(), rhs.to_scalar::<f32>().unwrap());
        assert!((l - r).abs() < 1e-4 * l.abs().max(1.0));
    }

    #[test]
    fn batch_norm_gradient_matches_finite_differences() {
        let (b, c, h, w) = (3, 2, 2, 3);
        let xs = ramp(b * c * h * w, 0.05);
        let gamma = Var::from_vec(vec![1.3f32, -0.7], c, &Device::Cpu).unwrap();
        let beta = Var::from_vec(vec![0.1f32, 0.2], c, &Device::Cpu).unwrap();
        let weights = Tensor::from_vec(ramp(b * c * h * w, 0.03), (b, c, h, w), &Device::Cpu).unwrap();
        let loss_of = |xs: &[f32]| -> f64 {
            let x = Tensor::from_vec(xs.to_vec(), (b, c, h, w), &Device::Cpu).unwrap();
            let y = x.apply_op3_no_bwd(&gamma, &beta, &BatchNormTrain { eps: 1e-5 }).unwrap();
            (y * &weights).unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap() as f64
        };
        let x = Var::from_vec(xs.clone(), (b, c, h, w), &Device::Cpu).unwrap();
        let y = x
            .as_tensor()
            .apply_op3(gamma.as_tensor(), beta.as_tensor(), BatchNormTrain { eps: 1e-5 })
            .unwrap();
        let grads = (y * &weights).unwrap().sum_all().unwrap().backward().unwrap();
        let dx = grads.get(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for i in [0, 5, 17, 30] {
            let eps = 1e-2;
            let mut plus = xs.clone();
            plus[i] += eps;
            let mut minus = xs.clone();
            minus[i] -= eps;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps as f64);
            assert!((fd - dx[i] as f64).abs() < 2e-2 * fd.abs().max(0.1), "{i}: {fd} vs {}", dx[i]);
        }
        let dbeta = grads.get(&beta).unwrap().to_vec1::<f32>().unwrap();
        let wsum = weights.sum((0, 2, 3)).unwrap().to_vec1::<f32>().unwrap();
        for ch in 0..c {
            assert!((dbeta[ch] - wsum[ch]).abs() < 1e-4);
        }
    }
}
