use nalgebra::Vector3;

use super::camera::{CameraIntrinsics, StereoRig};
use crate::error::{Error, Result};

/// Per-pixel scalar field with a validity mask, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Left-referenced disparity in pixels: `d = u_left − u_right`.
pub type DisparityMap = DenseMap;

/// Metric depth along the optical axis.
pub type DepthMap = DenseMap;

impl DenseMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if values.len() != width * height || valid.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height} map with {} values and {} flags",
                values.len(),
                valid.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values,
            valid,
        })
    }

    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    /// Map whose non-finite entries are invalid.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        let valid = values.iter().map(|v| v.is_finite()).collect();
        Self::new(width, height, values, valid)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, u: usize, v: usize) -> Option<f64> {
        let i = v * self.width + u;
        self.valid[i].then_some(self.values[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn same_shape(&self, other: &DenseMap) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Checks the disparity invariant: valid entries lie in `[0, width)`.
    pub fn check_disparity(&self) -> Result<()> {
        for (i, (&d, &ok)) in self.values.iter().zip(&self.valid).enumerate() {
            if ok && !(d >= 0.0 && d < self.width as f64) {
                return Err(Error::InvalidArgument(format!(
                    "disparity {d} at pixel {i} outside [0, {})",
                    self.width
                )));
            }
        }
        Ok(())
    }
}

/// `Z = fx·B/d`; disparities at or below the validity threshold become invalid.
pub fn disparity_to_depth(disparity: &DisparityMap, rig: &StereoRig) -> DepthMap {
    let mut values = vec![0.0; disparity.len()];
    let mut valid = vec![false; disparity.len()];
    for i in 0..disparity.len() {
        if disparity.valid[i] {
            if let Some(z) = rig.depth(disparity.values[i]) {
                values[i] = z;
                valid[i] = true;
            }
        }
    }
    DenseMap {
        width: disparity.width,
        height: disparity.height,
        values,
        valid,
    }
}

pub fn depth_to_disparity(depth: &DepthMap, rig: &StereoRig) -> DisparityMap {
    let mut values = vec![0.0; depth.len()];
    let mut valid = vec![false; depth.len()];
    for i in 0..depth.len() {
        if depth.valid[i] {
            if let Some(d) = rig.disparity(depth.values[i]) {
                values[i] = d;
                valid[i] = true;
            }
        }
    }
    DenseMap {
        width: depth.width,
        height: depth.height,
        values,
        valid,
    }
}

/// Camera-frame points, optionally tagged with their source pixel and a label.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub pixels: Option<Vec<(usize, usize)>>,
    pub labels: Option<Vec<u8>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Keeps the points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            pixels: self.pixels.as_ref().map(|p| indices.iter().map(|&i| p[i]).collect()),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }
}

/// One point per valid pixel: `X = (u−cx)·Z/fx`, `Y = (v−cy)·Z/fy`.
pub fn backproject(depth: &DepthMap, k: &CameraIntrinsics) -> PointCloud {
    let mut points = Vec::new();
    let mut pixels = Vec::new();
    for v in 0..depth.height {
        for u in 0..depth.width {
            let i = v * depth.width + u;
            let z = depth.values[i];
            if depth.valid[i] && z > 0.0 {
                points.push(k.unproject(u as f64, v as f64, z));
                pixels.push((u, v));
            }
        }
    }
    PointCloud {
        points,
        pixels: Some(pixels),
        labels: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rig() -> StereoRig {
        StereoRig::new(CameraIntrinsics::new(100.0, 100.0, 3.0, 2.0, 8, 6).unwrap(), 1.0).unwrap()
    }

    #[test]
    fn principal_point_backprojects_onto_axis() {
        let r = rig();
        let mut depth = DenseMap::invalid(8, 6);
        depth.values[2 * 8 + 3] = 5.0;
        depth.valid[2 * 8 + 3] = true;
        let cloud = backproject(&depth, &r.intrinsics);
        assert_eq!(cloud.points, vec![Vector3::new(0.0, 0.0, 5.0)]);
        assert_eq!(cloud.pixels.unwrap(), vec![(3, 2)]);
        assert!(backproject(&DenseMap::invalid(8, 6), &r.intrinsics).is_empty());
    }

    #[test]
    fn zero_disparity_is_invalid_depth() {
        let d = DenseMap::from_values(2, 1, vec![0.0, 10.0]).unwrap();
        let z = disparity_to_depth(&d, &rig());
        assert_eq!(z.valid, vec![false, true]);
        assert_eq!(z.values[1], 10.0);
    }

    proptest! {
        #[test]
        fn depth_disparity_round_trip(zs in prop::collection::vec(0.5f64..100.0, 48)) {
            let r = rig();
            let depth = DenseMap::from_values(8, 6, zs.clone()).unwrap();
            let back = disparity_to_depth(&depth_to_disparity(&depth, &r), &r);
            for (a, b) in zs.iter().zip(&back.values) {
                prop_assert!((a - b).abs() < 1e-12 * a.max(1.0));
            }
        }

        #[test]
        fn backprojection_reprojects_to_source_pixel(zs in prop::collection::vec(0.1f64..80.0, 48)) {
            let r = rig();
            let depth = DenseMap::from_values(8, 6, zs).unwrap();
            let cloud = backproject(&depth, &r.intrinsics);
            for (p, &(u, v)) in cloud.points.iter().zip(cloud.pixels.as_ref().unwrap()) {
                let (pu, pv, _) = r.intrinsics.project(p).unwrap();
                prop_assert!((pu - u as f64).abs() < 1e-9 && (pv - v as f64).abs() < 1e-9);
            }
        }
    }
}
