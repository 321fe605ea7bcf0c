use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::raster::{is_degenerate, Triangle};
use crate::pose::{fps_select, DEFAULT_KEYPOINTS};

type V3 = Vector3<f64>;

/// Triangles in the default target: three boxes of 12.
pub const TARGET_TRIANGLES: usize = 36;
pub const DEFAULT_SURFACE_POINTS: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Body,
    Panel,
}

impl Part {
    pub fn class(self) -> usize {
        match self {
            Part::Body => 0,
            Part::Panel => 1,
        }
    }
}

/// Cuboid body centered at the origin with two panels extending along ±x.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetParams {
    /// Body extents (x, y, z) in meters.
    pub body: [f64; 3],
    pub panel_length: f64,
    pub panel_width: f64,
    pub panel_thickness: f64,
    /// Clearance between body and panel.
    pub panel_gap: f64,
    pub surface_points: usize,
    pub keypoints: usize,
    pub seed: u64,
}

impl Default for TargetParams {
    fn default() -> Self {
        Self {
            body: [1.2, 1.2, 1.6],
            panel_length: 2.4,
            panel_width: 0.9,
            panel_thickness: 0.05,
            panel_gap: 0.1,
            surface_points: DEFAULT_SURFACE_POINTS,
            keypoints: DEFAULT_KEYPOINTS,
            seed: 0,
        }
    }
}

impl TargetParams {
    pub fn scaled_body(mut self, factor: f64) -> Self {
        self.body = self.body.map(|b| b * factor);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.body[0],
            self.body[1],
            self.body[2],
            self.panel_length,
            self.panel_width,
            self.panel_thickness,
        ];
        if dims.iter().any(|&d| !(d > 0.0 && d.is_finite())) || !(self.panel_gap >= 0.0) {
            return Err(Error::InvalidArgument(format!("target dimensions must be positive: {self:?}")));
        }
        if self.surface_points < self.keypoints || self.keypoints < 3 {
            return Err(Error::InvalidArgument(format!(
                "need ≥ 3 keypoints and at least as many surface points, got {} and {}",
                self.keypoints, self.surface_points
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TargetModel {
    pub params: TargetParams,
    /// Object-frame triangles, counter-clockwise seen from outside.
    pub triangles: Vec<Triangle>,
    pub parts: Vec<Part>,
    /// Outward unit normal per triangle.
    pub normals: Vec<V3>,
    pub points: Vec<V3>,
    /// Triangle each surface point was drawn from.
    pub point_triangles: Vec<usize>,
    pub keypoints: Vec<V3>,
    /// Largest distance between two mesh vertices.
    pub diameter: f64,
}

fn push_box(tris: &mut Vec<Triangle>, normals: &mut Vec<V3>, center: V3, half: V3) {
    let corner = |sx: f64, sy: f64, sz: f64| center + V3::new(sx * half.x, sy * half.y, sz * half.z);
    for axis in 0..3 {
        for sign in [-1.0, 1.0] {
            let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
            let mut quad = Vec::with_capacity(4);
            for (sa, sb) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
                let mut s = [0.0; 3];
                s[axis] = sign;
                s[a] = sa;
                s[b] = sb;
                quad.push(corner(s[0], s[1], s[2]));
            }
            let mut n = V3::zeros();
            n[axis] = sign;
            let mut t1 = [quad[0], quad[1], quad[2]];
            let mut t2 = [quad[0], quad[2], quad[3]];
            if (t1[1] - t1[0]).cross(&(t1[2] - t1[0])).dot(&n) < 0.0 {
                t1.swap(1, 2);
                t2.swap(1, 2);
            }
            tris.push(t1);
            tris.push(t2);
            normals.push(n);
            normals.push(n);
        }
    }
}

fn area(t: &Triangle) -> f64 {
    0.5 * (t[1] - t[0]).cross(&(t[2] - t[0])).norm()
}

/// Builds the mesh, samples surface points area-proportionally and selects keypoints.
pub fn build_target(params: &TargetParams) -> Result<TargetModel> {
    params.validate()?;
    let mut triangles = Vec::with_capacity(TARGET_TRIANGLES);
    let mut normals = Vec::with_capacity(TARGET_TRIANGLES);
    let half_body = V3::from(params.body) / 2.0;
    push_box(&mut triangles, &mut normals, V3::zeros(), half_body);
    let mut parts = vec![Part::Body; triangles.len()];
    let half_panel = V3::new(params.panel_length / 2.0, params.panel_thickness / 2.0, params.panel_width / 2.0);
    for sign in [-1.0, 1.0] {
        let cx = sign * (half_body.x + params.panel_gap + half_panel.x);
        push_box(&mut triangles, &mut normals, V3::new(cx, 0.0, 0.0), half_panel);
    }
    parts.resize(triangles.len(), Part::Panel);
    if let Some(i) = triangles.iter().position(is_degenerate) {
        return Err(Error::Degenerate(format!("target triangle {i} has zero area")));
    }

    let areas: Vec<f64> = triangles.iter().map(area).collect();
    let mut cumulative = Vec::with_capacity(areas.len());
    let mut acc = 0.0;
    for a in &areas {
        acc += a;
        cumulative.push(acc);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut points = Vec::with_capacity(params.surface_points);
    let mut point_triangles = Vec::with_capacity(params.surface_points);
    for _ in 0..params.surface_points {
        let r = rng.random_range(0.0..acc);
        let ti = cumulative.partition_point(|&c| c <= r).min(triangles.len() - 1);
        let (s, t): (f64, f64) = (rng.random(), rng.random());
        let su = s.sqrt();
        let tri = &triangles[ti];
        points.push(tri[0] * (1.0 - su) + tri[1] * (su * (1.0 - t)) + tri[2] * (su * t));
        point_triangles.push(ti);
    }
    let keypoints = fps_select(&points, params.keypoints)?;
    let verts: Vec<V3> = triangles.iter().flatten().copied().collect();
    let mut diameter: f64 = 0.0;
    for a in &verts {
        for b in &verts {
            diameter = diameter.max((a - b).norm());
        }
    }
    Ok(TargetModel {
        params: *params,
        triangles,
        parts,
        normals,
        points,
        point_triangles,
        keypoints,
        diameter,
    })
}

/// Closest point on a triangle (Ericson's region test).
pub fn closest_point_on_triangle(p: &V3, t: &Triangle) -> V3 {
    let (a, b, c) = (t[0], t[1], t[2]);
    let (ab, ac, ap) = (b - a, c - a, p - a);
    let (d1, d2) = (ab.dot(&ap), ac.dot(&ap));
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = p - b;
    let (d3, d4) = (ab.dot(&bp), ac.dot(&bp));
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let (d5, d6) = (ab.dot(&cp), ac.dot(&cp));
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

impl TargetModel {
    /// Distance from an object-frame point to the mesh and the nearest triangle.
    pub fn surface_distance(&self, p: &V3) -> (f64, usize) {
        self.triangles
            .iter()
            .enumerate()
            .map(|(i, t)| ((closest_point_on_triangle(p, t) - p).norm(), i))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .expect("non-empty mesh")
    }

    pub fn bounding_box(&self) -> (V3, V3) {
        let mut lo = V3::repeat(f64::INFINITY);
        let mut hi = V3::repeat(f64::NEG_INFINITY);
        for v in self.triangles.iter().flatten() {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }
}
