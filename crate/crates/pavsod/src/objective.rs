//! Loss stack and evaluation metrics.
//!
//! The task objective is the structure loss, a per-frame sum of binary
//! cross-entropy (computed on logits for stability, mean over pixels) and
//! Dice loss, for both branches; the distillation term is an MSE between
//! student and detached teacher features:
//! `L = L_struc_stu + L_struc_tch + lambda_distill * L_distill`.
//! Metrics are MAE and the adaptive F-measure (threshold 2*mean, beta^2 = 0.3).

use crate::acoustic::bce_logits_mean;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_distill: f64,
    pub lambda_dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_distill: 5.0,
            lambda_dice: 1.0,
        }
    }
}

/// Scalar components of one training step, in f64 regardless of the
/// training precision. `total` always recomputes exactly as
/// `l_struc_stu + l_struc_tch + lambda_distill * l_distill`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_struc_stu: f64,
    pub l_struc_tch: f64,
    pub l_distill: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(l_struc_stu: f64, l_struc_tch: f64, l_distill: f64, weights: &LossWeights) -> Self {
        LossReport {
            l_struc_stu,
            l_struc_tch,
            l_distill,
            total: l_struc_stu + l_struc_tch + weights.lambda_distill * l_distill,
        }
    }
}

/// Mean binary cross-entropy on logits; see `acoustic::bce_logits_mean`
/// for the fused stable form.
pub fn bce_loss<T: Real>(g: &mut Graph<T>, logits: Var, gt: Var) -> Result<Var> {
    if g.shape(logits) != g.shape(gt) {
        return Err(Error::shape(
            "bce_loss",
            format!("{:?} vs {:?}", g.shape(logits), g.shape(gt)),
        ));
    }
    bce_logits_mean(g, logits, gt)
}

/// Smooth Dice loss on probabilities:
/// `1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)`.
pub fn dice_loss<T: Real>(g: &mut Graph<T>, probs: Var, gt: Var, eps: f64) -> Result<Var> {
    if g.shape(probs) != g.shape(gt) {
        return Err(Error::shape(
            "dice_loss",
            format!("{:?} vs {:?}", g.shape(probs), g.shape(gt)),
        ));
    }
    let e = T::from_f64(eps);
    let inter = g.mul(probs, gt)?;
    let num = g.sum_all(inter);
    let num = g.scale(num, T::from_f64(2.0));
    let num = g.add_const(num, e);
    let sp = g.sum_all(probs);
    let sg = g.sum_all(gt);
    let den = g.add(sp, sg)?;
    let den = g.add_const(den, e);
    let ratio = g.div(num, den)?;
    let neg = g.neg(ratio);
    Ok(g.add_const(neg, T::one()))
}

pub const DICE_EPS: f64 = 1.0;

/// Structure loss over a clip: `sum_t bce(logits_t, gt_t) +
/// lambda_dice * sum_t dice(sigmoid(logits_t), gt_t)`.
/// `logits` and `gt` are `[T, 1, H, W]`.
pub fn structure_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    gt: Var,
    lambda_dice: f64,
) -> Result<Var> {
    let lsh = g.shape(logits).to_vec();
    let gsh = g.shape(gt).to_vec();
    if lsh != gsh || lsh.len() != 4 {
        return Err(Error::shape("structure_loss", format!("{lsh:?} vs {gsh:?}")));
    }
    let t_frames = lsh[0];
    let mut total: Option<Var> = None;
    for t in 0..t_frames {
        let lt = g.slice(logits, 0, t, 1)?;
        let gt_t = g.slice(gt, 0, t, 1)?;
        let bce = bce_loss(g, lt, gt_t)?;
        let frame_loss = if lambda_dice != 0.0 {
            let probs = g.sigmoid(lt);
            let dice = dice_loss(g, probs, gt_t, DICE_EPS)?;
            let dice = g.scale(dice, T::from_f64(lambda_dice));
            g.add(bce, dice)?
        } else {
            bce
        };
        total = Some(match total {
            Some(acc) => g.add(acc, frame_loss)?,
            None => frame_loss,
        });
    }
    total.ok_or_else(|| Error::invalid("structure_loss", "zero frames"))
}

/// Feature distillation: `sum_t mean((f_stu_t - f_tch_t)^2)`. The teacher
/// side is expected to be detached by the caller (`stop_gradient`).
pub fn distill_loss<T: Real>(g: &mut Graph<T>, f_stu: Var, f_tch: Var) -> Result<Var> {
    let ssh = g.shape(f_stu).to_vec();
    if ssh != g.shape(f_tch) {
        return Err(Error::shape(
            "distill_loss",
            format!("{:?} vs {:?}", ssh, g.shape(f_tch)),
        ));
    }
    let t_frames = ssh[0];
    let mut total: Option<Var> = None;
    for t in 0..t_frames {
        let st = g.slice(f_stu, 0, t, 1)?;
        let tt = g.slice(f_tch, 0, t, 1)?;
        let d = g.sub(st, tt)?;
        let sq = g.mul(d, d)?;
        let m = g.mean_all(sq);
        total = Some(match total {
            Some(acc) => g.add(acc, m)?,
            None => m,
        });
    }
    total.ok_or_else(|| Error::invalid("distill_loss", "zero frames"))
}

/// Combine per-branch structure losses and the distillation term on the
/// tape; returns the total Var for backward plus the f64 report.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    l_stu: Var,
    l_tch: Option<Var>,
    l_distill: Option<Var>,
    weights: &LossWeights,
) -> Result<(Var, LossReport)> {
    let stu_v = g.value(l_stu).item().to_f64_();
    let mut total = l_stu;
    let mut tch_v = 0.0;
    if let Some(lt) = l_tch {
        tch_v = g.value(lt).item().to_f64_();
        total = g.add(total, lt)?;
    }
    let mut dis_v = 0.0;
    if let Some(ld) = l_distill {
        dis_v = g.value(ld).item().to_f64_();
        let scaled = g.scale(ld, T::from_f64(weights.lambda_distill));
        total = g.add(total, scaled)?;
    }
    let report = LossReport::new(stu_v, tch_v, dis_v, weights);
    if !report.total.is_finite() {
        return Err(Error::Diverged {
            step: 0,
            detail: format!("non-finite loss components {report:?}"),
        });
    }
    Ok((total, report))
}

// ── metrics (plain f64, off-tape) ───────────────────────────────────

/// Mean absolute error between two maps in [0,1].
pub fn mae(pred: &Tensor<f64>, gt: &Tensor<f64>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            "mae",
            format!("{:?} vs {:?}", pred.shape(), gt.shape()),
        ));
    }
    let n = pred.numel() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| (p - g).abs())
        .sum::<f64>()
        / n)
}

/// Adaptive F-measure: threshold at `min(2*mean(pred), 1)`, beta^2 = 0.3.
/// `None` when the ground truth is empty (metric undefined, frame skipped).
pub fn adaptive_fbeta(pred: &Tensor<f64>, gt: &Tensor<f64>) -> Result<Option<f64>> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            "adaptive_fbeta",
            format!("{:?} vs {:?}", pred.shape(), gt.shape()),
        ));
    }
    let gt_pos = gt.data().iter().filter(|&&v| v > 0.5).count();
    if gt_pos == 0 {
        return Ok(None);
    }
    let mean = pred.data().iter().sum::<f64>() / pred.numel() as f64;
    let thresh = (2.0 * mean).min(1.0);
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let pp = p > thresh;
        let gp = g > 0.5;
        match (pp, gp) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fp == 0 {
        // No positive predictions above threshold: precision defined as 0.
        return Ok(Some(0.0));
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    let beta2 = 0.3;
    if precision + recall == 0.0 {
        return Ok(Some(0.0));
    }
    Ok(Some(
        (1.0 + beta2) * precision * recall / (beta2 * precision + recall),
    ))
}
