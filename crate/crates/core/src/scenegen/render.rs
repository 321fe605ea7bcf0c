use std::f64::consts::TAU;

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::target::{Part, TargetModel};
use crate::error::{Error, Result};
use crate::geometry::raster::{cast, rasterize_depth, Raster, Triangle};
use crate::geometry::{degrade, DisparityMap, Image, NoiseSpec, StereoRig};
use crate::pose::Pose;

type V3 = Vector3<f64>;

pub const MASK_BACKGROUND: u8 = 0;
/// Visible in the left view only (occluded or out of frame on the right).
pub const MASK_LEFT_ONLY: u8 = 128;
pub const MASK_BOTH: u8 = 255;

/// Default depth range in meters.
pub const Z_RANGE: (f64, f64) = (10.0, 50.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Illumination {
    DirectSolar,
    EarthAlbedo,
    Penumbra,
    Mixed,
}

impl Illumination {
    pub const ALL: [Illumination; 4] = [
        Illumination::DirectSolar,
        Illumination::EarthAlbedo,
        Illumination::Penumbra,
        Illumination::Mixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Illumination::DirectSolar => "direct_solar",
            Illumination::EarthAlbedo => "earth_albedo",
            Illumination::Penumbra => "penumbra",
            Illumination::Mixed => "mixed",
        }
    }

    /// `(sun, hemispheric, ambient)` intensities.
    fn recipe(self) -> (f64, f64, f64) {
        match self {
            Illumination::DirectSolar => (1.0, 0.0, 0.02),
            Illumination::EarthAlbedo => (0.0, 0.35, 0.03),
            Illumination::Penumbra => (0.0, 0.0, 0.02),
            Illumination::Mixed => (0.6, 0.25, 0.02),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseTag {
    None,
    Speckle,
    GaussianBlur,
    MotionBlur,
}

impl NoiseTag {
    pub const ALL: [NoiseTag; 4] = [NoiseTag::None, NoiseTag::Speckle, NoiseTag::GaussianBlur, NoiseTag::MotionBlur];

    pub fn name(self) -> &'static str {
        match self {
            NoiseTag::None => "none",
            NoiseTag::Speckle => "speckle",
            NoiseTag::GaussianBlur => "gaussian_blur",
            NoiseTag::MotionBlur => "motion_blur",
        }
    }

    pub fn of(spec: &NoiseSpec) -> NoiseTag {
        match spec {
            NoiseSpec::None => NoiseTag::None,
            NoiseSpec::Speckle { .. } => NoiseTag::Speckle,
            NoiseSpec::GaussianBlur { .. } => NoiseTag::GaussianBlur,
            NoiseSpec::MotionBlur { .. } => NoiseTag::MotionBlur,
        }
    }
}

/// Degradation magnitudes per tag. These are guesses, not calibrated values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub speckle_sigma: f64,
    pub blur_sigma: f64,
    pub motion_length: f64,
    pub motion_angle_deg: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            speckle_sigma: 0.1,
            blur_sigma: 1.0,
            motion_length: 5.0,
            motion_angle_deg: 30.0,
        }
    }
}

impl NoiseParams {
    pub fn spec(&self, tag: NoiseTag) -> NoiseSpec {
        match tag {
            NoiseTag::None => NoiseSpec::None,
            NoiseTag::Speckle => NoiseSpec::Speckle {
                sigma: self.speckle_sigma,
            },
            NoiseTag::GaussianBlur => NoiseSpec::GaussianBlur { sigma: self.blur_sigma },
            NoiseTag::MotionBlur => NoiseSpec::MotionBlur {
                length: self.motion_length,
                angle_deg: self.motion_angle_deg,
            },
        }
    }
}

/// One rendered stereo pair with its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub id: usize,
    pub seed: u64,
    pub left: Image,
    pub right: Image,
    /// Left-referenced; valid wherever the target is visible in the left view.
    pub disparity: DisparityMap,
    /// [`MASK_BACKGROUND`], [`MASK_LEFT_ONLY`] or [`MASK_BOTH`] per pixel.
    pub mask: Vec<u8>,
    pub pose: Pose,
    pub illumination: Illumination,
    pub noise: NoiseSpec,
    pub rig: StereoRig,
}

impl SceneSample {
    pub fn noise_tag(&self) -> NoiseTag {
        NoiseTag::of(&self.noise)
    }
}

/// Random object pose with `Z ~ U(z_min, z_max)` and a uniformly random
/// rotation. The object origin projects into the central part of both images.
pub fn sample_pose<R: Rng + ?Sized>(rng: &mut R, z_range: (f64, f64), rig: &StereoRig) -> Result<Pose> {
    let (z_min, z_max) = z_range;
    if !(z_min > 0.0 && z_min < z_max && z_max.is_finite()) {
        return Err(Error::InvalidArgument(format!("need 0 < z_min < z_max, got {z_range:?}")));
    }
    let k = &rig.intrinsics;
    let (w, h) = (k.width as f64, k.height as f64);
    let (mu, mv) = (0.15 * w, 0.15 * h);
    // widest disparity bounds the usable columns
    let d_max = rig.fb() / z_min;
    let (u_lo, u_hi) = (mu + d_max, w - 1.0 - mu);
    if u_lo >= u_hi {
        return Err(Error::Degenerate(format!(
            "no column keeps the target in both frames at z = {z_min} (disparity {d_max:.1} px)"
        )));
    }
    let z = rng.random_range(z_min..z_max);
    let u = rng.random_range(u_lo..u_hi);
    let v = rng.random_range(mv..h - 1.0 - mv);
    let t = k.unproject(u, v, z);
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let q = [b * (TAU * u3).cos(), a * (TAU * u2).sin(), a * (TAU * u2).cos(), b * (TAU * u3).sin()];
    Pose::from_quaternion(q, t)
}

fn hash01(ix: i64, iy: i64, iz: i64, salt: u64) -> f64 {
    let mut x = (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (iz as u64).wrapping_mul(0x1656_67B1_9E37_79F9)
        ^ salt;
    x ^= x >> 31;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 29;
    (x >> 11) as f64 / (1u64 << 53) as f64
}

/// Surface albedo from object-frame position: foil patches on the body,
/// a cell grid on the panels.
pub fn albedo(part: Part, p: &V3) -> [f64; 3] {
    match part {
        Part::Body => {
            let cell = 0.1;
            let n = hash01(
                (p.x / cell).floor() as i64,
                (p.y / cell).floor() as i64,
                (p.z / cell).floor() as i64,
                1,
            );
            let s = 0.6 + 0.4 * n;
            [0.9 * s, 0.72 * s, 0.3 * s]
        }
        Part::Panel => {
            let cell = 0.15;
            let line = 0.012;
            let fx = (p.x / cell).rem_euclid(1.0) * cell;
            let fz = (p.z / cell).rem_euclid(1.0) * cell;
            if fx < line || fz < line {
                [0.75, 0.75, 0.78]
            } else {
                let n = hash01((p.x / cell).floor() as i64, 0, (p.z / cell).floor() as i64, 2);
                let s = 0.8 + 0.4 * n;
                [0.12 * s, 0.16 * s, 0.45 * s]
            }
        }
    }
}

/// Direction towards the sun in the camera frame, on the camera side of the target.
fn sun_direction(seed: u64) -> V3 {
    let a = hash01(seed as i64, 0, 0, 3) * 1.2 - 0.6;
    let b = hash01(seed as i64, 1, 0, 3) * 1.2 - 0.6;
    V3::new(a, b, -1.0).normalize()
}

/// Image `v` grows downwards, so the Earth sits towards +y.
const EARTH_DIRECTION: V3 = V3::new(0.0, 1.0, 0.0);

struct View<'a> {
    model: &'a TargetModel,
    pose: Pose,
    raster: Raster,
}

impl View<'_> {
    fn shade(&self, rig: &StereoRig, illumination: Illumination, sun: &V3) -> Image {
        let k = &rig.intrinsics;
        let (sun_i, hemi_i, ambient) = illumination.recipe();
        let inv = self.pose.inverse();
        let mut img = Image::filled(k.width, k.height, 3, 0.0);
        for v in 0..k.height {
            for u in 0..k.width {
                let i = v * k.width + u;
                let Some(ti) = self.raster.triangle[i] else {
                    continue;
                };
                let ti = ti as usize;
                let p_cam = k.unproject(u as f64, v as f64, self.raster.depth.values[i]);
                let n = self.pose.r * self.model.normals[ti];
                let light = ambient + sun_i * n.dot(sun).max(0.0) + hemi_i * 0.5 * (1.0 + n.dot(&EARTH_DIRECTION));
                let a = albedo(self.model.parts[ti], &inv.apply(&p_cam));
                for c in 0..3 {
                    img.data[i * 3 + c] = a[c] * light;
                }
            }
        }
        img.clamp01();
        img
    }
}

pub fn posed_mesh(model: &TargetModel, pose: &Pose) -> Vec<Triangle> {
    model.triangles.iter().map(|t| t.map(|p| pose.apply(&p))).collect()
}

/// Renders both views independently, derives disparity from the left z-buffer
/// and the mask from a ray cast in the right camera, then degrades the images.
pub fn render_sample(
    model: &TargetModel,
    pose: &Pose,
    rig: &StereoRig,
    illumination: Illumination,
    noise: NoiseSpec,
    seed: u64,
) -> Result<SceneSample> {
    noise.validate()?;
    let k = &rig.intrinsics;
    let right_pose = Pose {
        r: pose.r,
        t: rig.to_right(&pose.t),
    };
    let left = View {
        model,
        pose: *pose,
        raster: rasterize_depth(&model.triangles, pose, k),
    };
    let right = View {
        model,
        pose: right_pose,
        raster: rasterize_depth(&model.triangles, &right_pose, k),
    };
    if left.raster.depth.valid_count() == 0 || right.raster.depth.valid_count() == 0 {
        return Err(Error::Degenerate("target is out of frame in at least one view".into()));
    }

    let right_mesh = posed_mesh(model, &right_pose);
    let mut disparity = DisparityMap::invalid(k.width, k.height);
    let mut mask = vec![MASK_BACKGROUND; k.width * k.height];
    for v in 0..k.height {
        for u in 0..k.width {
            let i = v * k.width + u;
            if !left.raster.depth.valid[i] {
                continue;
            }
            let z = left.raster.depth.values[i];
            let d = rig.fb() / z;
            disparity.values[i] = d;
            disparity.valid[i] = true;
            let p_right = rig.to_right(&k.unproject(u as f64, v as f64, z));
            let u_right = u as f64 - d;
            let in_frame = u_right >= -0.5 && u_right <= k.width as f64 - 0.5;
            // a hit short of the point itself means something blocks it
            let visible = in_frame
                && cast(&V3::zeros(), &p_right, &right_mesh).is_none_or(|(t, _)| t > 1.0 - 1e-9);
            mask[i] = if visible { MASK_BOTH } else { MASK_LEFT_ONLY };
        }
    }

    let sun = sun_direction(seed);
    let clean_left = left.shade(rig, illumination, &sun);
    let clean_right = right.shade(rig, illumination, &sun);
    Ok(SceneSample {
        id: 0,
        seed,
        left: degrade(&clean_left, &noise, seed ^ 0x4c45_4654)?,
        right: degrade(&clean_right, &noise, seed ^ 0x5249_4748)?,
        disparity,
        mask,
        pose: *pose,
        illumination,
        noise,
        rig: *rig,
    })
}

/// Mean intensity over pixels with a nonzero mask.
pub fn masked_mean(img: &Image, mask: &[u8]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, &m) in mask.iter().enumerate() {
        if m != MASK_BACKGROUND {
            sum += img.pixel(i % img.width, i / img.width).iter().sum::<f64>();
            count += img.channels;
        }
    }
    sum / count.max(1) as f64
}
