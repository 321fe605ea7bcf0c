use nalgebra::Vector3;

use super::camera::CameraIntrinsics;
use super::maps::DepthMap;
use crate::pose::Pose;

pub type Triangle = [Vector3<f64>; 3];

/// Vertices closer than this to the camera plane cause the triangle to be skipped.
pub const NEAR: f64 = 1e-6;

/// Depth buffer plus the index of the triangle visible at each pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub depth: DepthMap,
    pub triangle: Vec<Option<u32>>,
}

pub fn is_degenerate(tri: &Triangle) -> bool {
    (tri[1] - tri[0]).cross(&(tri[2] - tri[0])).norm() < 1e-12
}

/// Z-buffered rasterization sampled at integer pixel centers. Depth is the
/// exact ray/plane intersection, so it matches ray casting to rounding.
/// Zero-area triangles and triangles reaching behind [`NEAR`] are skipped.
pub fn rasterize_depth(mesh: &[Triangle], pose: &Pose, k: &CameraIntrinsics) -> Raster {
    let (w, h) = (k.width, k.height);
    let mut depth = DepthMap::invalid(w, h);
    let mut triangle = vec![None; w * h];
    for (ti, tri) in mesh.iter().enumerate() {
        let cam = tri.map(|p| pose.apply(&p));
        if is_degenerate(&cam) || cam.iter().any(|p| p.z <= NEAR) {
            continue;
        }
        let px: Vec<(f64, f64)> = cam
            .iter()
            .map(|p| (k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
            .collect();
        let area = edge(px[0], px[1], px[2]);
        if area == 0.0 {
            continue;
        }
        let normal = (cam[1] - cam[0]).cross(&(cam[2] - cam[0]));
        let plane = normal.dot(&cam[0]);
        let min_u = px.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).ceil().max(0.0);
        let max_u = px.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max).floor();
        let min_v = px.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).ceil().max(0.0);
        let max_v = px.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).floor();
        if max_u < 0.0 || max_v < 0.0 {
            continue;
        }
        let max_u = max_u.min((w - 1) as f64) as usize;
        let max_v = max_v.min((h - 1) as f64) as usize;
        for v in min_v as usize..=max_v {
            for u in min_u as usize..=max_u {
                let p = (u as f64, v as f64);
                let e = [edge(px[1], px[2], p), edge(px[2], px[0], p), edge(px[0], px[1], p)];
                let inside = if area > 0.0 {
                    e.iter().all(|&x| x >= 0.0)
                } else {
                    e.iter().all(|&x| x <= 0.0)
                };
                if !inside {
                    continue;
                }
                let ray = k.ray(p.0, p.1);
                let denom = normal.dot(&ray);
                if denom == 0.0 {
                    continue;
                }
                let z = plane / denom;
                let i = v * w + u;
                if z > 0.0 && (!depth.valid[i] || z < depth.values[i]) {
                    depth.values[i] = z;
                    depth.valid[i] = true;
                    triangle[i] = Some(ti as u32);
                }
            }
        }
    }
    Raster { depth, triangle }
}

fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

/// Möller–Trumbore intersection; returns the ray parameter of the hit.
pub fn ray_triangle(origin: &Vector3<f64>, dir: &Vector3<f64>, tri: &Triangle) -> Option<f64> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-15 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - tri[0];
    let a = s.dot(&p) * inv;
    if !(-1e-12..=1.0 + 1e-12).contains(&a) {
        return None;
    }
    let q = s.cross(&e1);
    let b = dir.dot(&q) * inv;
    if b < -1e-12 || a + b > 1.0 + 1e-12 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > 0.0).then_some(t)
}

/// Nearest hit of a ray against a camera-frame mesh, as `(t, triangle index)`.
pub fn cast(origin: &Vector3<f64>, dir: &Vector3<f64>, mesh: &[Triangle]) -> Option<(f64, usize)> {
    mesh.iter()
        .enumerate()
        .filter_map(|(i, tri)| ray_triangle(origin, dir, tri).map(|t| (t, i)))
        .min_by(|a, b| a.0.total_cmp(&b.0))
}
