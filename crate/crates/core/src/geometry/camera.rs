use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Disparities at or below this many pixels are treated as invalid.
pub const D_MIN: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && (0.0..self.width as f64).contains(&self.cx)
            && (0.0..self.height as f64).contains(&self.cy);
        if !ok {
            return Err(Error::InvalidArgument(format!("bad intrinsics {self:?}")));
        }
        Ok(())
    }

    /// 160×120 with a 200 px focal length; keeps disparities of a 10–50 m
    /// target at a 1 m baseline between 4 and 20 px.
    pub fn desk() -> Self {
        Self {
            fx: 200.0,
            fy: 200.0,
            cx: 79.5,
            cy: 59.5,
            width: 160,
            height: 120,
        }
    }

    /// 1280×960 rendering resolution at the same field of view as [`Self::desk`].
    pub fn full_scale() -> Self {
        Self {
            fx: 1600.0,
            fy: 1600.0,
            cx: 639.5,
            cy: 479.5,
            width: 1280,
            height: 960,
        }
    }

    /// Pixel coordinates and depth of a camera-frame point.
    pub fn project(&self, p: &Vector3<f64>) -> Result<(f64, f64, f64)> {
        if p.z <= 0.0 || p.z.is_nan() {
            return Err(Error::BehindCamera(p.z));
        }
        Ok((
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
            p.z,
        ))
    }

    /// Camera-frame point at pixel `(u, v)` and depth `z`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    /// Direction (z = 1) of the ray through pixel `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        self.unproject(u, v, 1.0)
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u > -0.5 && v > -0.5 && u < self.width as f64 - 0.5 && v < self.height as f64 - 0.5
    }
}

/// Rectified parallel stereo pair with shared intrinsics. The right camera sits
/// `baseline` meters along +x of the left one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StereoRig {
    pub intrinsics: CameraIntrinsics,
    pub baseline: f64,
}

impl StereoRig {
    pub fn new(intrinsics: CameraIntrinsics, baseline: f64) -> Result<Self> {
        intrinsics.validate()?;
        if !(baseline > 0.0) {
            return Err(Error::InvalidArgument(format!("baseline {baseline} must be > 0")));
        }
        Ok(Self {
            intrinsics,
            baseline,
        })
    }

    pub fn desk() -> Self {
        Self {
            intrinsics: CameraIntrinsics::desk(),
            baseline: 1.0,
        }
    }

    /// `fx·B`, the depth-disparity product.
    pub fn fb(&self) -> f64 {
        self.intrinsics.fx * self.baseline
    }

    /// Depth of a disparity, `None` at or below [`D_MIN`].
    pub fn depth(&self, d: f64) -> Option<f64> {
        (d > D_MIN && d.is_finite()).then(|| self.fb() / d)
    }

    pub fn disparity(&self, z: f64) -> Option<f64> {
        (z > 0.0 && z.is_finite()).then(|| self.fb() / z)
    }

    /// Left-camera point expressed in the right camera frame.
    pub fn to_right(&self, p: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(p.x - self.baseline, p.y, p.z)
    }
}
