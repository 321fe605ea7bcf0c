use nalgebra::{Matrix3, Matrix4, Vector3};

use super::types::Pose;
use crate::error::{Error, Result};

type V3 = Vector3<f64>;

/// Relative size of the second principal extent below which a point set counts as collinear.
pub const COLLINEAR_TOL: f64 = 1e-10;

/// Eigen-decomposition of a symmetric 4×4 matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and the matching eigenvectors as columns.
pub fn jacobi_eigen4(a: &Matrix4<f64>) -> ([f64; 4], Matrix4<f64>) {
    let mut m = *a;
    let mut v = Matrix4::identity();
    let scale = a.abs().max().max(f64::MIN_POSITIVE);
    for _sweep in 0..64 {
        let off: f64 = (0..4).flat_map(|p| (p + 1..4).map(move |q| (p, q))).map(|(p, q)| m[(p, q)] * m[(p, q)]).sum();
        if off.sqrt() <= 1e-22 * scale {
            break;
        }
        for p in 0..4 {
            for q in p + 1..4 {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..4 {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..4 {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;
                for k in 0..4 {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let values = [m[(0, 0)], m[(1, 1)], m[(2, 2)], m[(3, 3)]];
    (values, v)
}

fn centroid(points: &[V3]) -> V3 {
    points.iter().sum::<V3>() / points.len() as f64
}

/// Fails when the centered point set spans less than a plane.
fn check_spread(points: &[V3], what: &str) -> Result<()> {
    let c = centroid(points);
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    let mut ev: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= COLLINEAR_TOL * ev[0] {
        return Err(Error::Degenerate(format!("{what} keypoints are collinear or coincident")));
    }
    Ok(())
}

/// Least-squares rigid transform with `kp_camera ≈ R·kp_object + t`.
///
/// Centers both sets, builds the 3×3 cross-covariance and takes the rotation
/// from the dominant eigenvector of the associated symmetric 4×4 matrix, which
/// is a unit quaternion, so reflections cannot occur.
pub fn fit_pose(kp_object: &[V3], kp_camera: &[V3]) -> Result<Pose> {
    if kp_object.len() != kp_camera.len() {
        return Err(Error::Mismatch(format!(
            "{} object vs {} camera keypoints",
            kp_object.len(),
            kp_camera.len()
        )));
    }
    if kp_object.len() < 3 {
        return Err(Error::Degenerate(format!("need ≥ 3 keypoints, got {}", kp_object.len())));
    }
    if kp_object.iter().chain(kp_camera).any(|p| !p.iter().all(|x| x.is_finite())) {
        return Err(Error::InvalidArgument("non-finite keypoint".into()));
    }
    check_spread(kp_object, "object")?;
    check_spread(kp_camera, "camera")?;
    let (co, cc) = (centroid(kp_object), centroid(kp_camera));
    let mut s = Matrix3::zeros();
    for (a, b) in kp_object.iter().zip(kp_camera) {
        s += (a - co) * (b - cc).transpose();
    }
    let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
    let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
    let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
    let n = Matrix4::new(
        sxx + syy + szz,
        syz - szy,
        szx - sxz,
        sxy - syx,
        syz - szy,
        sxx - syy - szz,
        sxy + syx,
        szx + sxz,
        szx - sxz,
        sxy + syx,
        -sxx + syy - szz,
        syz + szy,
        sxy - syx,
        szx + sxz,
        syz + szy,
        -sxx - syy + szz,
    );
    let (values, vectors) = jacobi_eigen4(&n);
    let best = (0..4).max_by(|&a, &b| values[a].total_cmp(&values[b])).expect("four eigenvalues");
    let q = vectors.column(best);
    let pose = Pose::from_quaternion([q[0], q[1], q[2], q[3]], V3::zeros())?;
    let t = cc - pose.r * co;
    Ok(Pose { r: pose.r, t })
}

/// Root-mean-square residual of `kp_camera − (R·kp_object + t)`.
pub fn fit_residual(pose: &Pose, kp_object: &[V3], kp_camera: &[V3]) -> f64 {
    let ss: f64 = kp_object.iter().zip(kp_camera).map(|(a, b)| (pose.apply(a) - b).norm_squared()).sum();
    (ss / kp_object.len().max(1) as f64).sqrt()
}
