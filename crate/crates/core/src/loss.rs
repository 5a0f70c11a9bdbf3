//! Training objectives: Gaussian focal loss on heatmaps, masked L1 on the
//! size maps, and their weighted sum. Every loss returns its exact gradient.

use crate::encode::SizeTargets;
use crate::error::{Error, Result};
use crate::grid::{Grid, Heatmap};
use crate::math::pairwise_sum;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub beta: f64,
    /// Probability clamp applied before taking logs.
    pub eps: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 4.0,
            eps: 1e-12,
        }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::invalid("focal params", "alpha and beta must be >= 0"));
        }
        if !(self.eps > 0.0 && self.eps < 1e-3) {
            return Err(Error::invalid("focal params", "eps must lie in (0, 1e-3)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_h: f64,
    pub lambda_size: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_h: 1.0,
            lambda_size: 0.1,
        }
    }
}

/// A scalar loss and its gradient with respect to one grid input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SizeLossGrad {
    pub loss: f64,
    pub grad_h: Vec<f64>,
    pub grad_w: Vec<f64>,
}

/// `x^a` with the convention `0^0 = 1`.
#[inline]
fn powf(x: f64, a: f64) -> f64 {
    if a == 0.0 {
        1.0
    } else {
        x.powf(a)
    }
}

/// `a * x^(a-1)`, zero when `a == 0`.
#[inline]
fn dpowf(x: f64, a: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else {
        a * powf(x, a - 1.0)
    }
}

/// Per-cell focal term and its derivative with respect to the prediction.
/// The derivative is taken at the clamped probability.
#[inline]
fn focal_cell(p: f64, g: f64, positive: bool, params: &FocalParams) -> (f64, f64) {
    let FocalParams { alpha, beta, eps } = *params;
    let p = p.clamp(eps, 1.0 - eps);
    if positive {
        let w = powf(1.0 - p, alpha);
        let lp = p.ln();
        let term = w * lp;
        let dterm = -dpowf(1.0 - p, alpha) * lp + w / p;
        (-term, -dterm)
    } else {
        let neg_w = powf(1.0 - g, beta);
        let l1p = (1.0 - p).ln();
        let term = neg_w * powf(p, alpha) * l1p;
        let dterm = neg_w * (dpowf(p, alpha) * l1p - powf(p, alpha) / (1.0 - p));
        (-term, -dterm)
    }
}

/// Focal loss where positive cells are exactly those with ground truth 1.
pub fn gaussian_focal_loss(pred: &Heatmap, gt: &Heatmap, params: &FocalParams) -> Result<LossGrad> {
    let positives: Vec<bool> = gt.data().iter().map(|&g| g == 1.0).collect();
    gaussian_focal_loss_with_positives(pred, gt, &positives, params)
}

/// Focal loss with an explicit positive set. The loss is normalized by the
/// number of positives, or by 1 when there are none.
pub fn gaussian_focal_loss_with_positives(
    pred: &Heatmap,
    gt: &Heatmap,
    positives: &[bool],
    params: &FocalParams,
) -> Result<LossGrad> {
    params.validate()?;
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            what: "focal loss",
            expected: gt.shape(),
            found: pred.shape(),
        });
    }
    if positives.len() != gt.data().len() {
        return Err(Error::ShapeMismatch {
            what: "focal positives",
            expected: gt.shape(),
            found: (positives.len(), 1),
        });
    }
    let n = positives.iter().filter(|&&p| p).count().max(1) as f64;
    let mut terms = Vec::with_capacity(positives.len());
    let mut grad = Vec::with_capacity(positives.len());
    for ((&p, &g), &pos) in pred.data().iter().zip(gt.data()).zip(positives) {
        let (t, d) = focal_cell(p, g, pos, params);
        terms.push(t);
        grad.push(d / n);
    }
    Ok(LossGrad {
        loss: pairwise_sum(&terms) / n,
        grad,
    })
}

/// Mean absolute error of both size channels over the positive cells.
pub fn size_l1_loss(pred_h: &Grid, pred_w: &Grid, targets: &SizeTargets) -> Result<SizeLossGrad> {
    let shape = (targets.rows, targets.cols);
    for g in [pred_h, pred_w] {
        if g.shape() != shape {
            return Err(Error::ShapeMismatch {
                what: "size loss",
                expected: shape,
                found: g.shape(),
            });
        }
    }
    let len = shape.0 * shape.1;
    let mut grad_h = vec![0.0; len];
    let mut grad_w = vec![0.0; len];
    let npos = targets.positives();
    if npos == 0 {
        return Ok(SizeLossGrad {
            loss: 0.0,
            grad_h,
            grad_w,
        });
    }
    let scale = 1.0 / (2.0 * npos as f64);
    let mut terms = Vec::with_capacity(2 * npos);
    for i in (0..len).filter(|&i| targets.pos_mask[i]) {
        let dh = pred_h.data()[i] - targets.h_map[i];
        let dw = pred_w.data()[i] - targets.w_map[i];
        terms.push(dh.abs());
        terms.push(dw.abs());
        grad_h[i] = dh.signum() * scale * (dh != 0.0) as u8 as f64;
        grad_w[i] = dw.signum() * scale * (dw != 0.0) as u8 as f64;
    }
    Ok(SizeLossGrad {
        loss: pairwise_sum(&terms) * scale,
        grad_h,
        grad_w,
    })
}

pub fn total_loss(focal: f64, size: f64, weights: &LossWeights) -> Result<f64> {
    if !focal.is_finite() {
        return Err(Error::NonFinite("focal loss"));
    }
    if !size.is_finite() {
        return Err(Error::NonFinite("size loss"));
    }
    Ok(weights.lambda_h * focal + weights.lambda_size * size)
}
