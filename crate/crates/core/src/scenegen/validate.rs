use nalgebra::Vector3;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::render::{posed_mesh, SceneSample, MASK_BACKGROUND};
use super::target::TargetModel;
use crate::error::{Error, Result};
use crate::geometry::cast;

/// Allowed residuals. `rel` scales with the disparity (pixels) or depth (meters).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerance {
    pub px: f64,
    pub meters: f64,
    pub rel: f64,
}

impl Tolerance {
    /// For samples held in memory.
    pub const EXACT: Tolerance = Tolerance {
        px: 1e-6,
        meters: 1e-6,
        rel: 0.0,
    };
    /// For samples read back from disk, where disparity went through `f32`.
    pub const PFM: Tolerance = Tolerance {
        px: 1e-6,
        meters: 1e-6,
        rel: f32::EPSILON as f64,
    };
}

/// Pixels sampled for the surface-distance check.
pub const SURFACE_PIXELS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyReport {
    pub checked: usize,
    /// Largest `|d − fx·B/Z|` over valid pixels, `Z` from casting the posed mesh.
    pub max_disparity_residual: f64,
    pub max_surface_distance: f64,
    /// Valid pixels whose ray misses the mesh or exceeds the tolerance.
    pub failures: usize,
    /// Pixels where the mask and disparity validity disagree.
    pub mask_errors: usize,
}

impl ConsistencyReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.mask_errors == 0
    }
}

/// Re-derives disparity by ray casting the annotated pose and checks that
/// back-projected depth lands on the model surface.
pub fn check_consistency(sample: &SceneSample, model: &TargetModel, tol: Tolerance, seed: u64) -> Result<ConsistencyReport> {
    let rig = &sample.rig;
    let k = &rig.intrinsics;
    let disp = &sample.disparity;
    if disp.width != k.width || disp.height != k.height || sample.mask.len() != disp.len() {
        return Err(Error::Mismatch(format!(
            "sample {}: {}x{} disparity, {} mask pixels, rig {}x{}",
            sample.id,
            disp.width,
            disp.height,
            sample.mask.len(),
            k.width,
            k.height
        )));
    }
    let mesh = posed_mesh(model, &sample.pose);
    let mut report = ConsistencyReport {
        checked: 0,
        max_disparity_residual: 0.0,
        max_surface_distance: 0.0,
        failures: 0,
        mask_errors: 0,
    };
    let mut valid = Vec::new();
    for i in 0..disp.len() {
        let (u, v) = ((i % k.width) as f64, (i / k.width) as f64);
        if disp.valid[i] != (sample.mask[i] != MASK_BACKGROUND) {
            report.mask_errors += 1;
        }
        if !disp.valid[i] {
            continue;
        }
        valid.push(i);
        report.checked += 1;
        let d = disp.values[i];
        match cast(&Vector3::zeros(), &k.ray(u, v), &mesh) {
            Some((z, _)) => {
                let expect = rig.fb() / z;
                let r = (d - expect).abs();
                report.max_disparity_residual = report.max_disparity_residual.max(r);
                if r > tol.px + tol.rel * expect {
                    report.failures += 1;
                }
            }
            None => report.failures += 1,
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inv = sample.pose.inverse();
    let picks = index::sample(&mut rng, valid.len(), SURFACE_PIXELS.min(valid.len()));
    for j in picks {
        let i = valid[j];
        let Some(z) = rig.depth(disp.values[i]) else {
            report.failures += 1;
            continue;
        };
        let p = k.unproject((i % k.width) as f64, (i / k.width) as f64, z);
        let (dist, _) = model.surface_distance(&inv.apply(&p));
        report.max_surface_distance = report.max_surface_distance.max(dist);
        if dist > tol.meters + tol.rel * z {
            report.failures += 1;
        }
    }
    Ok(report)
}

/// Like [`check_consistency`] but fails on any violation.
pub fn validate_sample(sample: &SceneSample, model: &TargetModel, tol: Tolerance) -> Result<ConsistencyReport> {
    let report = check_consistency(sample, model, tol, sample.seed)?;
    if !report.passed() {
        return Err(Error::Mismatch(format!(
            "sample {:05} fails disparity/pose consistency: {} of {} pixels out of tolerance \
             (max residual {:.3e} px, max surface distance {:.3e} m), {} mask errors",
            sample.id,
            report.failures,
            report.checked,
            report.max_disparity_residual,
            report.max_surface_distance,
            report.mask_errors
        )));
    }
    Ok(report)
}
