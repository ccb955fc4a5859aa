//! Training objectives, written against candle tensors so they work in both
//! `f32` (training) and `f64` (gradient checks).

use candle_core::{DType, Tensor, D};

use crate::{Error, Result};

/// Mean squared error over masked entries:
/// `||M*x - M*recon||^2 / sum(M)`.
///
/// Normalising by the mask count keeps the value comparable across mask
/// sizes and mel resolutions.
pub fn masked_mse(x: &Tensor, recon: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if x.dims() != recon.dims() || x.dims() != mask.dims() {
        return Err(Error::invalid(format!(
            "masked_mse shape mismatch: x {:?}, recon {:?}, mask {:?}",
            x.dims(),
            recon.dims(),
            mask.dims()
        )));
    }
    let count = mask.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if count <= 0.0 {
        return Err(Error::invalid("mask selects no entries"));
    }
    let residual = ((x * mask)? - (recon * mask)?)?;
    Ok((residual.sqr()?.sum_all()? / count)?)
}

/// Per-window masked MSE for a batch `[b, w, m]`, returning `[b]`.
pub fn masked_mse_per_window(x: &Tensor, recon: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let residual = ((x * mask)? - (recon * mask)?)?;
    let sq = residual.sqr()?.sum(D::Minus1)?.sum(D::Minus1)?;
    let count = mask.sum(D::Minus1)?.sum(D::Minus1)?;
    Ok(sq.div(&count)?)
}

/// Supervised contrastive loss for one anchor.
///
/// `anchor` is `[d]`, `positives` `[p, d]`, `negatives` `[q, d]`; all are
/// expected to be L2-normalised. Returns `None` when there are no positives,
/// in which case the anchor does not contribute.
pub fn contrastive_loss(
    anchor: &Tensor,
    positives: &Tensor,
    negatives: &Tensor,
    temperature: f64,
) -> Result<Option<Tensor>> {
    let n_pos = positives.dim(0)?;
    if n_pos == 0 {
        return Ok(None);
    }
    let pool = Tensor::cat(&[positives, negatives], 0)?;
    let logits = (pool.matmul(&anchor.unsqueeze(1)?)?.squeeze(1)? / temperature)?;
    let log_prob = candle_nn::ops::log_softmax(&logits, 0)?;
    let loss = log_prob.narrow(0, 0, n_pos)?.mean_all()?.neg()?;
    Ok(Some(loss))
}

/// Result of the batched contrastive loss.
pub struct ContrastiveBatch {
    /// Mean over anchors that had at least one positive.
    pub loss: Tensor,
    pub anchors: usize,
    pub skipped: usize,
}

/// Batched supervised contrastive loss.
///
/// Every original `i` is an anchor; its positives are the other originals
/// with the same label, its only negative is its own reconstruction.
/// Reconstructions never act as anchors.
pub fn batch_contrastive_loss(
    originals: &Tensor,
    reconstructions: &Tensor,
    labels: &[usize],
    temperature: f64,
) -> Result<ContrastiveBatch> {
    let (n, _) = originals.dims2()?;
    if reconstructions.dims() != originals.dims() || labels.len() != n {
        return Err(Error::invalid("contrastive batch shapes disagree"));
    }
    let dtype = originals.dtype();
    let device = originals.device();
    let mut pos_mask = vec![0f64; n * n];
    let mut pos_count = vec![0f64; n];
    for i in 0..n {
        for j in 0..n {
            if i != j && labels[i] == labels[j] {
                pos_mask[i * n + j] = 1.0;
                pos_count[i] += 1.0;
            }
        }
    }
    let valid: Vec<f64> = pos_count.iter().map(|&c| if c > 0.0 { 1.0 } else { 0.0 }).collect();
    let anchors = valid.iter().filter(|&&v| v > 0.0).count();
    if anchors == 0 {
        return Ok(ContrastiveBatch {
            loss: Tensor::zeros((), dtype, device)?,
            anchors: 0,
            skipped: n,
        });
    }
    let pos_mask = Tensor::from_vec(pos_mask, (n, n), device)?.to_dtype(dtype)?;
    let inv_count = Tensor::from_vec(
        pos_count.iter().map(|&c| 1.0 / c.max(1.0)).collect::<Vec<_>>(),
        n,
        device,
    )?
    .to_dtype(dtype)?;
    let valid_t = Tensor::from_vec(valid, n, device)?.to_dtype(dtype)?;

    let sim = (originals.matmul(&originals.t()?)? / temperature)?;
    let neg = ((originals * reconstructions)?.sum(1)? / temperature)?;
    let shift = Tensor::cat(&[&sim, &neg.unsqueeze(1)?], 1)?.max(1)?.detach();
    let pos_exp = (sim.broadcast_sub(&shift.unsqueeze(1)?)?.exp()? * &pos_mask)?.sum(1)?;
    let neg_exp = (&neg - &shift)?.exp()?;
    let log_denom = ((pos_exp + neg_exp)?.log()? + &shift)?;
    let mean_pos = ((&sim * &pos_mask)?.sum(1)? * &inv_count)?;
    let per_anchor = ((log_denom - mean_pos)? * &valid_t)?;
    let loss = (per_anchor.sum_all()? / anchors as f64)?;
    Ok(ContrastiveBatch {
        loss,
        anchors,
        skipped: n - anchors,
    })
}

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

/// Binary cross-entropy on the proxy logit `(z.w_p - z.w_n) / temperature`,
/// target 1 for originals and 0 for reconstructions, averaged over rows.
///
/// `z`, `w_pos`, `w_neg` are `[n, d]` (proxies already gathered for each
/// row's class), `targets` is `[n]`.
pub fn bce_proxy_loss(
    z: &Tensor,
    w_pos: &Tensor,
    w_neg: &Tensor,
    targets: &Tensor,
    temperature: f64,
) -> Result<Tensor> {
    let logit = ((z * w_pos)?.sum(D::Minus1)? - (z * w_neg)?.sum(D::Minus1)?)?;
    let logit = (logit / temperature)?;
    let per_row = (softplus(&logit)? - (&logit * targets)?)?;
    Ok(per_row.mean_all()?)
}

/// Mean cross-entropy of `logits` `[n, c]` against class indices.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let targets = Tensor::from_vec(
        labels.iter().map(|&l| l as u32).collect::<Vec<_>>(),
        labels.len(),
        logits.device(),
    )?;
    Ok(candle_nn::loss::cross_entropy(logits, &targets)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn t2(rows: &[&[f64]]) -> Tensor {
        let d = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(flat, (rows.len(), d), &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn masked_mse_examples() {
        let x = Tensor::zeros((5, 4), DType::F64, &Device::Cpu).unwrap();
        let mut m = vec![0f64; 20];
        m[8..12].fill(1.0);
        let mask = Tensor::from_vec(m, (5, 4), &Device::Cpu).unwrap();
        assert_eq!(scalar(&masked_mse(&x, &x, &mask).unwrap()), 0.0);
        let recon = (x.ones_like().unwrap() * 0.5).unwrap();
        assert_eq!(scalar(&masked_mse(&x, &recon, &mask).unwrap()), 0.25);
        let empty = x.zeros_like().unwrap();
        assert!(masked_mse(&x, &recon, &empty).is_err());
    }

    #[test]
    fn contrastive_hand_case() {
        let loss = contrastive_loss(&t1(&[1.0, 0.0]), &t2(&[&[1.0, 0.0]]), &t2(&[&[0.0, 1.0]]), 1.0)
            .unwrap()
            .unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((scalar(&loss) - expected).abs() < 1e-12);
        assert!((scalar(&loss) - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn contrastive_uniform_is_log_two() {
        let a = t1(&[0.6, 0.8]);
        let loss = contrastive_loss(&a, &t2(&[&[0.6, 0.8]]), &t2(&[&[0.6, 0.8]]), 1.0)
            .unwrap()
            .unwrap();
        assert!((scalar(&loss) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn contrastive_without_positives_is_skipped() {
        let empty = Tensor::zeros((0, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(contrastive_loss(&t1(&[1.0, 0.0]), &empty, &t2(&[&[0.0, 1.0]]), 1.0)
            .unwrap()
            .is_none());
    }

    #[test]
    fn far_negative_reduces_to_positive_softmax() {
        // Scaling the negative's logit towards -inf leaves the softmax over
        // positives alone.
        let anchor = t1(&[1.0, 0.0]);
        let pos = t2(&[&[0.8, 0.6], &[0.6, 0.8]]);
        let neg = t2(&[&[-1.0, 0.0]]);
        let temperature = 0.01;
        let got = scalar(&contrastive_loss(&anchor, &pos, &neg, temperature).unwrap().unwrap());
        let logits = [0.8 / temperature, 0.6 / temperature];
        let m = logits[0];
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        let oracle = -(logits.iter().map(|l| l - lse).sum::<f64>()) / 2.0;
        assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
    }

    #[test]
    fn batched_contrastive_matches_per_anchor() {
        let orig = crate::nn::l2_normalize(&t2(&[
            &[1.0, 0.2, 0.1],
            &[0.9, 0.1, 0.3],
            &[0.1, 1.0, 0.0],
            &[0.2, 0.8, 0.5],
            &[0.0, 0.1, 1.0],
        ]))
        .unwrap();
        let rec = crate::nn::l2_normalize(&t2(&[
            &[0.5, 0.5, 0.1],
            &[0.9, 0.4, 0.0],
            &[0.3, 1.0, 0.2],
            &[0.2, 0.1, 0.5],
            &[0.4, 0.1, 1.0],
        ]))
        .unwrap();
        let labels = [0, 0, 1, 1, 2];
        let batch = batch_contrastive_loss(&orig, &rec, &labels, 1.0).unwrap();
        assert_eq!((batch.anchors, batch.skipped), (4, 1));
        let mut total = 0.0;
        for i in 0..4 {
            let pos_idx: Vec<u32> = (0..5)
                .filter(|&j| j != i && labels[j] == labels[i])
                .map(|j| j as u32)
                .collect();
            let pos = orig
                .index_select(&Tensor::new(pos_idx.as_slice(), &Device::Cpu).unwrap(), 0)
                .unwrap();
            let neg = rec.narrow(0, i, 1).unwrap();
            let l = contrastive_loss(&orig.get(i).unwrap(), &pos, &neg, 1.0).unwrap().unwrap();
            total += scalar(&l);
        }
        assert!((scalar(&batch.loss) - total / 4.0).abs() < 1e-12);
    }

    #[test]
    fn bce_examples() {
        let z = t2(&[&[1.0, 0.0]]);
        let wp = t2(&[&[1.0, 0.0]]);
        let wn = t2(&[&[0.0, 1.0]]);
        let one = t1(&[1.0]);
        let zero = t1(&[0.0]);
        let original = scalar(&bce_proxy_loss(&z, &wp, &wn, &one, 1.0).unwrap());
        assert!((original - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((original - 0.31326).abs() < 1e-5);
        // Zero logit: log 2 for either target.
        let mid = t2(&[&[std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2]]);
        for target in [&one, &zero] {
            let l = scalar(&bce_proxy_loss(&mid, &wp, &wn, target, 1.0).unwrap());
            assert!((l - 2f64.ln()).abs() < 1e-12);
        }
        // L(t=1, l) == L(t=0, -l): swap the proxies.
        let flipped = scalar(&bce_proxy_loss(&z, &wn, &wp, &zero, 1.0).unwrap());
        assert!((flipped - original).abs() < 1e-15);
    }

    #[test]
    fn softplus_is_stable() {
        let x = t1(&[-800.0, 0.0, 800.0]);
        let y = softplus(&x).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(y[2], 800.0);
    }
}
