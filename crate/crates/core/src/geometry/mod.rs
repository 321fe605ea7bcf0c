//! Rectified stereo geometry: pinhole projection, triangulation, depth
//! rasterization, image degradations and the image/disparity file formats.

pub mod camera;
pub mod formats;
pub mod image;
pub mod maps;
pub mod raster;

pub use camera::{CameraIntrinsics, StereoRig, D_MIN};
pub use image::{degrade, Image, NoiseSpec};
pub use maps::{backproject, depth_to_disparity, disparity_to_depth, DenseMap, DepthMap, DisparityMap, PointCloud};
pub use raster::{cast, rasterize_depth, ray_triangle, Raster, Triangle};
