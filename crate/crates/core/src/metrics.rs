//! Disparity metrics (EPE, RMSE, bad-τ, D1) and pose errors.
//!
//! Disparity metrics run over pixels valid in both the prediction and the
//! ground truth (and an optional extra mask).

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::DisparityMap;
use crate::pose::{check_rotation, Pose};

/// Orthonormality tolerance for [`rotation_error`] inputs.
pub const ROTATION_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisparityEvalReport {
    pub epe: f64,
    pub rmse: f64,
    /// `(τ, fraction)` pairs.
    pub bad: Vec<(f64, f64)>,
    pub d1: f64,
    pub n: usize,
}

impl DisparityEvalReport {
    /// Flat `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut s = format!("n={}\nepe={}\nrmse={}\nd1={}\n", self.n, self.epe, self.rmse, self.d1);
        for (tau, frac) in &self.bad {
            s.push_str(&format!("bad_{tau}={frac}\n"));
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseEvalReport {
    pub e_t: f64,
    pub e_r: f64,
    pub e_r_deg: f64,
}

/// Per-pixel absolute errors and ground-truth values over the evaluated pixels.
fn errors(pred: &DisparityMap, gt: &DisparityMap, mask: Option<&[bool]>) -> Result<Vec<(f64, f64)>> {
    if !pred.same_shape(gt) || mask.is_some_and(|m| m.len() != gt.len()) {
        return Err(Error::Mismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let out: Vec<(f64, f64)> = (0..gt.len())
        .filter(|&i| pred.valid[i] && gt.valid[i] && mask.is_none_or(|m| m[i]))
        .map(|i| ((pred.values[i] - gt.values[i]).abs(), gt.values[i]))
        .collect();
    if out.is_empty() {
        return Err(Error::Empty("evaluation mask"));
    }
    Ok(out)
}

pub fn epe(pred: &DisparityMap, gt: &DisparityMap, mask: Option<&[bool]>) -> Result<f64> {
    let e = errors(pred, gt, mask)?;
    Ok(e.iter().map(|p| p.0).sum::<f64>() / e.len() as f64)
}

pub fn rmse(pred: &DisparityMap, gt: &DisparityMap, mask: Option<&[bool]>) -> Result<f64> {
    let e = errors(pred, gt, mask)?;
    Ok((e.iter().map(|p| p.0 * p.0).sum::<f64>() / e.len() as f64).sqrt())
}

/// Fraction of pixels with error strictly above `tau`.
pub fn bad_tau(pred: &DisparityMap, gt: &DisparityMap, mask: Option<&[bool]>, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau {tau} must be > 0")));
    }
    let e = errors(pred, gt, mask)?;
    Ok(e.iter().filter(|p| p.0 > tau).count() as f64 / e.len() as f64)
}

/// Outlier iff `|err| > 3` and `|err| > 0.05·d_gt`.
pub fn is_d1_outlier(err: f64, gt: f64) -> bool {
    err > 3.0 && err > 0.05 * gt
}

pub fn d1(pred: &DisparityMap, gt: &DisparityMap, mask: Option<&[bool]>) -> Result<f64> {
    let e = errors(pred, gt, mask)?;
    Ok(e.iter().filter(|p| is_d1_outlier(p.0, p.1)).count() as f64 / e.len() as f64)
}

pub fn evaluate_disparity(
    pred: &DisparityMap,
    gt: &DisparityMap,
    mask: Option<&[bool]>,
    taus: &[f64],
) -> Result<DisparityEvalReport> {
    let e = errors(pred, gt, mask)?;
    let n = e.len() as f64;
    let mut bad = Vec::with_capacity(taus.len());
    for &tau in taus {
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument(format!("tau {tau} must be > 0")));
        }
        bad.push((tau, e.iter().filter(|p| p.0 > tau).count() as f64 / n));
    }
    Ok(DisparityEvalReport {
        epe: e.iter().map(|p| p.0).sum::<f64>() / n,
        rmse: (e.iter().map(|p| p.0 * p.0).sum::<f64>() / n).sqrt(),
        bad,
        d1: e.iter().filter(|p| is_d1_outlier(p.0, p.1)).count() as f64 / n,
        n: e.len(),
    })
}

pub fn translation_error(t: &Vector3<f64>, t_hat: &Vector3<f64>) -> f64 {
    (t - t_hat).norm()
}

/// Geodesic angle `arccos((tr(RᵀR̂) − 1)/2)` in radians.
pub fn rotation_error(r: &Matrix3<f64>, r_hat: &Matrix3<f64>) -> Result<f64> {
    check_rotation(r, ROTATION_TOL)?;
    check_rotation(r_hat, ROTATION_TOL)?;
    // atan2 of the sine and cosine parts equals acos((tr − 1)/2) but keeps
    // full precision near zero, where acos loses half the digits.
    let rel = r.transpose() * r_hat;
    let c = (rel.trace() - 1.0) / 2.0;
    let v = Vector3::new(rel[(2, 1)] - rel[(1, 2)], rel[(0, 2)] - rel[(2, 0)], rel[(1, 0)] - rel[(0, 1)]);
    Ok((v.norm() / 2.0).atan2(c))
}

pub fn evaluate_pose(gt: &Pose, pred: &Pose) -> Result<PoseEvalReport> {
    let e_r = rotation_error(&gt.r, &pred.r)?;
    Ok(PoseEvalReport {
        e_t: translation_error(&gt.t, &pred.t),
        e_r,
        e_r_deg: e_r.to_degrees(),
    })
}
