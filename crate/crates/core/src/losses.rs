//! Training objectives.
//!
//! Reconstruction is scored per patch as a root-mean-square error. A patch's
//! reference row is `raw (256) ⊕ log-PSD (129)`; the two parts get separate
//! RMSEs which are averaged with equal weight. Reductions over patches are
//! arithmetic means.

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::attention::Mat;
use crate::error::{Error, Result};
use crate::masking::TaskKind;

/// Pretraining weights λ1..λ4 (GPT, MAE-TP, MAE-CH, task token) and the
/// finetuning classification weight α.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gpt: f64,
    pub mae_tp: f64,
    pub mae_ch: f64,
    pub task: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gpt: 0.4,
            mae_tp: 0.275,
            mae_ch: 0.275,
            task: 0.05,
            alpha: 0.9,
        }
    }
}

impl LossWeights {
    /// λ of the reconstruction objective of `kind`.
    pub fn reconstruction(&self, kind: TaskKind) -> f64 {
        match kind {
            TaskKind::Gpt => self.gpt,
            TaskKind::MaeTp => self.mae_tp,
            TaskKind::MaeCh => self.mae_ch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.gpt, self.mae_tp, self.mae_ch, self.task, self.alpha];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) || self.alpha > 1.0 {
            return Err(Error::Config(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

/// Root-mean-square of `pred - target`.
pub fn patch_rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::InvalidInput("RMSE over zero-width patch".into()));
    }
    if pred.len() != target.len() {
        return Err(Error::Shape(format!("pred width {} vs target {}", pred.len(), target.len())));
    }
    Ok(rmse(pred, target))
}

fn rmse(pred: &[f64], target: &[f64]) -> f64 {
    let ss: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    (ss / pred.len() as f64).sqrt()
}

/// Adds `scale · ∂rmse/∂pred` into `grad`. The subgradient at zero error is 0.
fn rmse_grad(pred: &[f64], target: &[f64], scale: f64, grad: &mut [f64]) {
    let r = rmse(pred, target);
    if r == 0.0 {
        return;
    }
    let k = scale / (pred.len() as f64 * r);
    for ((g, p), t) in grad.iter_mut().zip(pred).zip(target) {
        *g += k * (p - t);
    }
}

/// Loss of one patch: RMSE of `[0, split)` and `[split, W)` averaged, or a
/// single RMSE when `split` is `0` or `W`.
pub fn recon_patch_loss(pred: &[f64], target: &[f64], split: usize) -> Result<f64> {
    if split == 0 || split >= pred.len() {
        return patch_rmse(pred, target);
    }
    Ok(0.5 * (patch_rmse(&pred[..split], &target[..split])? + patch_rmse(&pred[split..], &target[split..])?))
}

/// Mean [`recon_patch_loss`] over `(pred_row, target_row)` pairs of two
/// matrices. With `grad`, also accumulates the gradient w.r.t. `pred`.
pub fn paired_rmse(
    pred: &Mat,
    target: &Mat,
    pairs: &[(usize, usize)],
    split: usize,
    mut grad: Option<&mut Mat>,
) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let w = pred.ncols();
    let n = pairs.len() as f64;
    let ps = pred.as_slice().expect("standard layout");
    let ts = target.as_slice().expect("standard layout");
    let two_part = split > 0 && split < w;
    let mut total = 0.0;
    for &(pr, tr) in pairs {
        let p = &ps[pr * w..(pr + 1) * w];
        let t = &ts[tr * w..(tr + 1) * w];
        if two_part {
            total += 0.5 * (rmse(&p[..split], &t[..split]) + rmse(&p[split..], &t[split..]));
        } else {
            total += rmse(p, t);
        }
        if let Some(g) = grad.as_deref_mut() {
            let gs = &mut g.as_slice_mut().expect("standard layout")[pr * w..(pr + 1) * w];
            if two_part {
                let (ga, gb) = gs.split_at_mut(split);
                rmse_grad(&p[..split], &t[..split], 0.5 / n, ga);
                rmse_grad(&p[split..], &t[split..], 0.5 / n, gb);
            } else {
                rmse_grad(p, t, 1.0 / n, gs);
            }
        }
    }
    total / n
}

/// Mean of `-w[y] · log softmax(logits)[y]` over rows; with `grad`, also
/// writes the gradient w.r.t. the logits.
pub fn weighted_cross_entropy(
    logits: &Mat,
    labels: &[usize],
    weights: Option<&[f64]>,
    mut grad: Option<&mut Mat>,
) -> f64 {
    let n = logits.nrows() as f64;
    let mut total = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let y = labels[i];
        let w = weights.map_or(1.0, |w| w[y]);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += w * (lse - row[y]);
        if let Some(g) = grad.as_deref_mut() {
            for (j, v) in row.iter().enumerate() {
                let p = (v - lse).exp();
                g[[i, j]] += w * (p - if j == y { 1.0 } else { 0.0 }) / n;
            }
        }
    }
    total / n
}

/// Next-step forecasting loss: prediction at time slot `t` is scored against
/// the reference at `t + 1`, averaged over `B · C · (T - 1)` patches.
pub fn loss_gpt(pred: &Array4<f64>, reference: &Array4<f64>, split: usize) -> Result<f64> {
    check_same(pred, reference)?;
    let (b, t, c, _) = pred.dim();
    if t < 2 {
        return Err(Error::InvalidInput("forecasting loss needs T >= 2".into()));
    }
    let mut total = 0.0;
    for bi in 0..b {
        for ti in 0..t - 1 {
            for ci in 0..c {
                let p = pred.slice(ndarray::s![bi, ti, ci, ..]).to_vec();
                let r = reference.slice(ndarray::s![bi, ti + 1, ci, ..]).to_vec();
                total += recon_patch_loss(&p, &r, split)?;
            }
        }
    }
    Ok(total / (b * (t - 1) * c) as f64)
}

/// Masked reconstruction loss: mean patch loss over `omega`, a list of
/// `(batch, time, channel)` positions.
pub fn loss_mae(pred: &Array4<f64>, reference: &Array4<f64>, omega: &[(usize, usize, usize)], split: usize) -> Result<f64> {
    check_same(pred, reference)?;
    if omega.is_empty() {
        return Err(Error::InvalidInput("masked loss over an empty set".into()));
    }
    let mut total = 0.0;
    for &(b, t, c) in omega {
        let p = pred.slice(ndarray::s![b, t, c, ..]).to_vec();
        let r = reference.slice(ndarray::s![b, t, c, ..]).to_vec();
        total += recon_patch_loss(&p, &r, split)?;
    }
    Ok(total / omega.len() as f64)
}

/// Mean cross-entropy over the ten task categories.
pub fn loss_dt(task_logits: &Mat, labels: &[usize]) -> Result<f64> {
    if task_logits.nrows() != labels.len() {
        return Err(Error::Shape(format!("{} logit rows for {} labels", task_logits.nrows(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= task_logits.ncols()) {
        return Err(Error::InvalidInput(format!("label {bad} out of range")));
    }
    Ok(weighted_cross_entropy(task_logits, labels, None, None))
}

pub fn pretrain_total(l_gpt: f64, l_mae_tp: f64, l_mae_ch: f64, l_dt: f64, w: &LossWeights) -> f64 {
    w.gpt * l_gpt + w.mae_tp * l_mae_tp + w.mae_ch * l_mae_ch + w.task * l_dt
}

/// Weights `1/√freq`, rescaled to mean one.
pub fn class_weights(freqs: &[f64]) -> Result<Vec<f64>> {
    if freqs.is_empty() {
        return Err(Error::InvalidInput("no classes".into()));
    }
    if let Some(i) = freqs.iter().position(|&f| !(f > 0.0)) {
        return Err(Error::InvalidInput(format!("class {i} has non-positive frequency")));
    }
    let raw: Vec<f64> = freqs.iter().map(|f| 1.0 / f.sqrt()).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(raw.into_iter().map(|w| w / mean).collect())
}

/// `Σ_k (α · L_cls^k + (1 - α) · L_rec)`.
pub fn loss_finetune(cls_losses: &[f64], l_rec: f64, alpha: f64) -> f64 {
    cls_losses.iter().map(|l| alpha * l + (1.0 - alpha) * l_rec).sum()
}

fn check_same(a: &Array4<f64>, b: &Array4<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("prediction {:?} vs reference {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rmse_examples() {
        assert_eq!(patch_rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((patch_rmse(&[3.0, 1.0, -2.0], &[1.0, -1.0, -4.0]).unwrap() - 2.0).abs() < 1e-15);
        assert!((patch_rmse(&[1.0, 2.0], &[0.0, 0.0]).unwrap() - 1.581_138_8).abs() < 1e-6);
        assert!(patch_rmse(&[], &[]).is_err());
    }

    #[test]
    fn gpt_examples() {
        let r = Array4::from_shape_fn((1, 2, 1, 6), |(_, t, _, w)| (t * 10 + w) as f64);
        // perfect forecast: slot 0 holds the reference of time 1
        let mut p = Array4::zeros((1, 2, 1, 6));
        p.slice_mut(ndarray::s![0, 0, 0, ..]).assign(&r.slice(ndarray::s![0, 1, 0, ..]));
        assert_eq!(loss_gpt(&p, &r, 4).unwrap(), 0.0);
        let p2 = p.mapv(|v| v + 2.0);
        assert!((loss_gpt(&p2, &r, 4).unwrap() - 2.0).abs() < 1e-12);
        let pb = ndarray::concatenate(ndarray::Axis(0), &[p2.view(), p2.view()]).unwrap();
        let rb = ndarray::concatenate(ndarray::Axis(0), &[r.view(), r.view()]).unwrap();
        assert_eq!(loss_gpt(&pb, &rb, 4).unwrap(), loss_gpt(&p2, &r, 4).unwrap());
        assert!(loss_gpt(&Array4::zeros((1, 1, 1, 4)), &Array4::zeros((1, 1, 1, 4)), 2).is_err());
    }

    #[test]
    fn mae_examples() {
        let r = Array4::<f64>::zeros((1, 3, 2, 4));
        let mut p = r.clone();
        p.slice_mut(ndarray::s![0, 0, 1, ..]).fill(1.0);
        p.slice_mut(ndarray::s![0, 2, 0, ..]).fill(3.0);
        assert!((loss_mae(&p, &r, &[(0, 0, 1), (0, 2, 0)], 2).unwrap() - 2.0).abs() < 1e-15);
        // visible positions do not matter
        let mut p2 = p.clone();
        p2[[0, 1, 1, 0]] = 99.0;
        assert_eq!(loss_mae(&p2, &r, &[(0, 0, 1), (0, 2, 0)], 2).unwrap(), 2.0);
        assert_eq!(loss_mae(&r, &r, &[(0, 1, 1)], 2).unwrap(), 0.0);
        assert!(loss_mae(&p, &r, &[], 2).is_err());
    }

    #[test]
    fn dt_examples() {
        let uniform = Mat::zeros((3, 10));
        assert!((loss_dt(&uniform, &[0, 4, 9]).unwrap() - 10f64.ln()).abs() < 1e-12);
        let mut confident = Mat::zeros((1, 10));
        confident[[0, 3]] = 20.0;
        // nine competitors at margin 20: ln(1 + 9e-20)
        let expected = (9.0 * (-20f64).exp()).ln_1p();
        assert!((loss_dt(&confident, &[3]).unwrap() - expected).abs() < 1e-6 * expected);
        confident[[0, 3]] = 23.0;
        assert!(loss_dt(&confident, &[3]).unwrap() < 1e-8);
        assert!(loss_dt(&uniform, &[0, 1, 10]).is_err());
        let logits = array![[0.3, -1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.1], [1.0; 10]];
        let a = loss_dt(&logits, &[2, 5]).unwrap();
        let swapped = array![[1.0; 10], [0.3, -1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.1]];
        assert!((a - loss_dt(&swapped, &[5, 2]).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn totals_and_weights() {
        let w = LossWeights::default();
        assert!((pretrain_total(1.0, 1.0, 1.0, 1.0, &w) - 1.0).abs() < 1e-12);
        let zero = LossWeights { gpt: 0.0, mae_tp: 0.0, mae_ch: 0.0, task: 0.0, alpha: 0.0 };
        assert_eq!(pretrain_total(3.0, 2.0, 1.0, 5.0, &zero), 0.0);
        assert!((pretrain_total(2.0, 0.0, 0.0, 0.0, &w) - 0.8).abs() < 1e-15);

        let cw = class_weights(&[9.0, 1.0]).unwrap();
        assert!((cw[0] - 0.5).abs() < 1e-12 && (cw[1] - 1.5).abs() < 1e-12);
        assert_eq!(class_weights(&[4.0, 4.0, 4.0]).unwrap(), vec![1.0; 3]);
        let a = class_weights(&[3.0, 5.0, 11.0]).unwrap();
        let b = class_weights(&[12.0, 20.0, 44.0]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(class_weights(&[1.0, 0.0]).is_err());

        assert_eq!(loss_finetune(&[1.7], 5.0, 1.0), 1.7);
        assert!((loss_finetune(&[1.0], 2.0, 0.9) - 1.1).abs() < 1e-12);
        assert!((loss_finetune(&[1.0, 1.0], 2.0, 0.9) - 2.2).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let pred = Mat::from_shape_fn((4, 7), |_| rng.random::<f64>() - 0.5);
        let target = Mat::from_shape_fn((4, 7), |_| rng.random::<f64>() - 0.5);
        let pairs = [(0, 1), (2, 2), (3, 0)];
        let mut g = Mat::zeros(pred.dim());
        paired_rmse(&pred, &target, &pairs, 4, Some(&mut g));
        let labels = [1, 0, 6, 3];
        let weights = [0.5, 1.2, 0.8, 1.0, 1.0, 1.0, 2.0];
        let mut gce = Mat::zeros(pred.dim());
        weighted_cross_entropy(&pred, &labels, Some(&weights), Some(&mut gce));
        let h = 1e-5;
        for i in 0..pred.len() {
            let bump = |d: f64| {
                let mut p = pred.clone();
                p.as_slice_mut().unwrap()[i] += d;
                p
            };
            let n1 = (paired_rmse(&bump(h), &target, &pairs, 4, None) - paired_rmse(&bump(-h), &target, &pairs, 4, None))
                / (2.0 * h);
            let n2 = (weighted_cross_entropy(&bump(h), &labels, Some(&weights), None)
                - weighted_cross_entropy(&bump(-h), &labels, Some(&weights), None))
                / (2.0 * h);
            for (a, n) in [(g.as_slice().unwrap()[i], n1), (gce.as_slice().unwrap()[i], n2)] {
                assert!((a - n).abs() / a.abs().max(n.abs()).max(1e-6) < 1e-4, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn losses_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let p = Mat::from_shape_fn((3, 10), |_| rng.random::<f64>() * 6.0 - 3.0);
            let t = Mat::from_shape_fn((3, 10), |_| rng.random::<f64>() * 6.0 - 3.0);
            assert!(paired_rmse(&p, &t, &[(0, 0), (1, 2)], 5, None) >= 0.0);
            assert!(weighted_cross_entropy(&p, &[1, 2, 9], None, None) >= 0.0);
        }
    }
}
