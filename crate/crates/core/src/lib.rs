//! Stereo disparity estimation, cross-modal attention fusion and keypoint-based
//! 6-DOF pose recovery for a non-cooperative spacecraft target, together with
//! the procedural stereo scenes used to exercise them.

pub mod attention;
pub mod checks;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod pose;
pub mod scenegen;
pub mod stereo;

pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, DenseMap, DepthMap, DisparityMap, Image, PointCloud, StereoRig};
pub use pose::Pose;
