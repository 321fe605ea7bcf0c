use std::rc::Rc;

use numkernel::{Graph, Tensor, Var};

use crate::error::{Error, Result};

/// Smoothing inside `sqrt(‖·‖² + ε²) − ε`, which is exact at zero and keeps
/// the gradient finite there.
pub const NORM_SMOOTH: f64 = 1e-150;
/// Lower clamp on the true-class confidence before the logarithm.
pub const FOCAL_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0 }
    }
}

/// Task weights `K₁, K₂, K₃`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub keypoint: f64,
    pub semantic: f64,
    pub center: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            keypoint: 1.0,
            semantic: 1.0,
            center: 1.0,
        }
    }
}

fn indicator_column(g: &Graph, indicator: &[bool]) -> Result<Var> {
    let n = indicator.len();
    Ok(g.constant(Tensor::new(&[n, 1], indicator.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())?))
}

/// `(1/N) Σ_i Σ_j ‖pred_ij − gt_ij‖ · 𝕀_i` over `[N, J, 3]` offsets.
fn masked_norm_sum(g: &Graph, pred: Var, gt: &Tensor, indicator: &[bool], what: &'static str) -> Result<Var> {
    let s = g.shape(pred);
    if s.len() != 3 || s[2] != 3 || gt.shape() != s.as_slice() || indicator.len() != s[0] {
        return Err(Error::Mismatch(format!(
            "{what}: prediction {s:?}, target {:?}, {} indicators",
            gt.shape(),
            indicator.len()
        )));
    }
    if s[0] == 0 {
        return Err(Error::Empty(what));
    }
    let diff = g.sub(pred, g.constant(gt.clone()))?;
    let ss = g.sum_axis(g.square(diff)?, 2)?;
    let norm = g.add_scalar(g.sqrt(g.add_scalar(ss, NORM_SMOOTH * NORM_SMOOTH)?)?, -NORM_SMOOTH)?;
    let masked = g.mul(norm, indicator_column(g, indicator)?)?;
    Ok(g.scale(g.sum(masked)?, 1.0 / s[0] as f64)?)
}

/// Keypoint offset loss over `pred: [N, M, 3]`, normalized by `N` only.
pub fn keypoint_loss(g: &Graph, pred: Var, gt: &Tensor, indicator: &[bool]) -> Result<Var> {
    masked_norm_sum(g, pred, gt, indicator, "keypoint loss")
}

/// Center offset loss over `pred: [N, 3]`.
pub fn center_loss(g: &Graph, pred: Var, gt: &Tensor, indicator: &[bool]) -> Result<Var> {
    let s = g.shape(pred);
    if s.len() != 2 {
        return Err(Error::Mismatch(format!("center loss: prediction {s:?}")));
    }
    let pred = g.reshape(pred, &[s[0], 1, s[1]])?;
    let gt = gt.reshape(&[gt.shape()[0], 1, gt.len() / gt.shape()[0].max(1)])?;
    masked_norm_sum(g, pred, &gt, indicator, "center loss")
}

/// `−α(1 − p_t)^γ log p_t` averaged over points, with `p_t` the confidence of
/// the labelled class in `probs: [N, C]`.
pub fn focal_loss(g: &Graph, probs: Var, labels: &[usize], params: FocalParams) -> Result<Var> {
    let s = g.shape(probs);
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Mismatch(format!("focal loss: confidences {s:?} for {} labels", labels.len())));
    }
    if s[0] == 0 {
        return Err(Error::Empty("focal loss"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
        return Err(Error::InvalidArgument(format!("label {bad} outside {} classes", s[1])));
    }
    if !(params.gamma >= 0.0 && params.alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!("focal parameters {params:?}")));
    }
    let n = s[0];
    let index: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| i * s[1] + l).collect();
    let pt = g.gather(probs, Rc::new(index), &[n])?;
    let pt = g.clamp(pt, FOCAL_CLAMP, 1.0)?;
    let log_pt = g.log(pt)?;
    let one_minus = g.add_scalar(g.neg(pt)?, 1.0)?;
    let modulator = if params.gamma == 0.0 {
        None
    } else if params.gamma.fract() == 0.0 && params.gamma <= 16.0 {
        let mut m = one_minus;
        for _ in 1..params.gamma as usize {
            m = g.mul(m, one_minus)?;
        }
        Some(m)
    } else {
        let safe = g.clamp(one_minus, f64::MIN_POSITIVE, 1.0)?;
        Some(g.exp(g.scale(g.log(safe)?, params.gamma)?)?)
    };
    let per_point = match modulator {
        Some(m) => g.mul(m, log_pt)?,
        None => log_pt,
    };
    Ok(g.scale(g.sum(per_point)?, -params.alpha / n as f64)?)
}

/// `K₁·L_kp + K₂·L_sem + K₃·L_ctr`.
pub fn multitask_loss(g: &Graph, l_kp: Var, l_sem: Var, l_ctr: Var, w: LossWeights) -> Result<Var> {
    if [w.keypoint, w.semantic, w.center].iter().any(|&k| !(k >= 0.0)) {
        return Err(Error::InvalidArgument(format!("loss weights must be non-negative, got {w:?}")));
    }
    let a = g.scale(l_kp, w.keypoint)?;
    let b = g.scale(l_sem, w.semantic)?;
    let c = g.scale(l_ctr, w.center)?;
    Ok(g.add(g.add(a, b)?, c)?)
}
