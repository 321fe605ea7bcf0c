use std::fmt::Write as _;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::fit::fit_pose;
use super::keypoints::vote_keypoints;
use super::meanshift::{meanshift, MeanShiftConfig};
use super::types::Pose;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_pose, PoseEvalReport};

type V3 = Vector3<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseConfig {
    /// Mean-shift bandwidth as a fraction of the model diameter.
    pub bandwidth_frac: f64,
    pub max_seeds: usize,
}

impl Default for PoseConfig {
    fn default() -> Self {
        Self {
            bandwidth_frac: 0.05,
            max_seeds: 64,
        }
    }
}

/// Ground-truth offsets `R·kp_j + t − p_i` plus isotropic Gaussian noise.
pub fn oracle_offsets(points: &[V3], kp_object: &[V3], pose: &Pose, sigma: f64, seed: u64) -> Result<Vec<Vec<V3>>> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise sigma must be ≥ 0, got {sigma}")));
    }
    let kp_cam: Vec<V3> = kp_object.iter().map(|k| pose.apply(k)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("positive sigma");
    Ok(points
        .iter()
        .map(|p| {
            kp_cam
                .iter()
                .map(|k| {
                    let of = k - p;
                    if sigma > 0.0 {
                        of + V3::from_fn(|_, _| noise.sample(&mut rng))
                    } else {
                        of
                    }
                })
                .collect()
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct PoseEstimate {
    pub pose: Pose,
    /// Recovered camera-frame keypoint per index; `None` when it received no votes.
    pub keypoints: Vec<Option<V3>>,
    /// Keypoints whose two largest clusters tied.
    pub ties: usize,
}

/// Votes, clusters each keypoint's votes and fits the pose.
pub fn recover_pose(
    points: &[V3],
    offsets: &[Vec<V3>],
    indicator: &[bool],
    kp_object: &[V3],
    diameter: f64,
    config: &PoseConfig,
) -> Result<PoseEstimate> {
    let votes = vote_keypoints(points, offsets, indicator)?;
    if !votes.is_empty() && votes.len() != kp_object.len() {
        return Err(Error::Mismatch(format!("{} offset columns for {} keypoints", votes.len(), kp_object.len())));
    }
    let ms = MeanShiftConfig {
        max_seeds: config.max_seeds,
        ..MeanShiftConfig::new(config.bandwidth_frac * diameter)
    };
    let mut keypoints = Vec::with_capacity(kp_object.len());
    let mut ties = 0;
    let (mut obj, mut cam) = (Vec::new(), Vec::new());
    for (j, v) in votes.iter().enumerate() {
        if v.is_empty() {
            keypoints.push(None);
            continue;
        }
        let r = meanshift(v, &ms)?;
        ties += r.tie as usize;
        keypoints.push(Some(r.center()));
        obj.push(kp_object[j]);
        cam.push(r.center());
    }
    if cam.len() < 3 {
        return Err(Error::Degenerate(format!("only {} keypoints recovered", cam.len())));
    }
    let pose = fit_pose(&obj, &cam)?;
    Ok(PoseEstimate { pose, keypoints, ties })
}

/// Mean `(e_t, e_R)` of `fit_pose` on keypoints perturbed by `N(0, σ²)` per axis.
pub fn monte_carlo_fit(kp_object: &[V3], pose: &Pose, sigma: f64, trials: usize, seed: u64) -> Result<(f64, f64)> {
    if trials == 0 {
        return Err(Error::InvalidArgument("monte carlo needs ≥ 1 trial".into()));
    }
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("positive sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut et, mut er) = (0.0, 0.0);
    for _ in 0..trials {
        let cam: Vec<V3> = kp_object.iter().map(|k| pose.apply(k) + V3::from_fn(|_, _| noise.sample(&mut rng))).collect();
        let fit = fit_pose(kp_object, &cam)?;
        let r = evaluate_pose(pose, &fit)?;
        et += r.e_t;
        er += r.e_r;
    }
    Ok((et / trials as f64, er / trials as f64))
}

/// One line of the per-sample pose evaluation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRow {
    pub id: String,
    pub e_t: f64,
    pub e_r: f64,
    pub illumination: String,
    pub noise: String,
}

impl PoseRow {
    pub fn new(id: &str, report: &PoseEvalReport, illumination: &str, noise: &str) -> Self {
        Self {
            id: id.to_string(),
            e_t: report.e_t,
            e_r: report.e_r,
            illumination: illumination.to_string(),
            noise: noise.to_string(),
        }
    }
}

/// `id,e_t,e_r,e_r_deg,illumination,noise` rows.
pub fn pose_rows_csv(rows: &[PoseRow]) -> String {
    let mut s = String::from("id,e_t,e_r,e_r_deg,illumination,noise\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.id, r.e_t, r.e_r, r.e_r.to_degrees(), r.illumination, r.noise);
    }
    s
}

/// Mean translation and rotation errors.
pub fn mean_errors(rows: &[PoseRow]) -> Option<(f64, f64)> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    Some((rows.iter().map(|r| r.e_t).sum::<f64>() / n, rows.iter().map(|r| r.e_r).sum::<f64>() / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::fps_select;
    use rand::Rng;

    fn scene(seed: u64) -> (Vec<V3>, Vec<V3>, Pose) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model: Vec<V3> = (0..300).map(|_| V3::from_fn(|i, _| rng.random_range(-1.0..1.0) * [2.0, 1.0, 0.5][i])).collect();
        let kps = fps_select(&model, 8).unwrap();
        let pose = Pose::from_quaternion([0.9, 0.1, -0.3, 0.2], V3::new(0.5, -0.2, 20.0)).unwrap();
        let cam: Vec<V3> = model.iter().map(|p| pose.apply(p)).collect();
        (cam, kps, pose)
    }

    #[test]
    fn exact_chain() {
        let (pts, kps, pose) = scene(0);
        let offs = oracle_offsets(&pts, &kps, &pose, 0.0, 0).unwrap();
        let est = recover_pose(&pts, &offs, &vec![true; pts.len()], &kps, 4.5, &PoseConfig::default()).unwrap();
        let r = evaluate_pose(&pose, &est.pose).unwrap();
        assert!(r.e_t < 1e-9 && r.e_r < 1e-9, "{r:?}");
    }

    #[test]
    fn too_few_keypoints() {
        let (pts, kps, pose) = scene(1);
        let offs = oracle_offsets(&pts, &kps, &pose, 0.0, 0).unwrap();
        let none = vec![false; pts.len()];
        assert!(matches!(
            recover_pose(&pts, &offs, &none, &kps, 4.5, &PoseConfig::default()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn csv_layout() {
        let rows = vec![PoseRow {
            id: "00003".into(),
            e_t: 0.5,
            e_r: 0.0,
            illumination: "penumbra".into(),
            noise: "none".into(),
        }];
        let csv = pose_rows_csv(&rows);
        assert_eq!(csv.lines().nth(1).unwrap(), "00003,0.5,0,0,penumbra,none");
        assert_eq!(mean_errors(&rows), Some((0.5, 0.0)));
    }
}
