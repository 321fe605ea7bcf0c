use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rigid object→camera transform `p_cam = R·p_obj + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            r: Matrix3::identity(),
            t: Vector3::zeros(),
        }
    }

    /// Validates that `r` is a proper rotation to `tol`.
    pub fn new(r: Matrix3<f64>, t: Vector3<f64>, tol: f64) -> Result<Self> {
        check_rotation(&r, tol)?;
        Ok(Self { r, t })
    }

    /// From a `[w, x, y, z]` quaternion, normalized first.
    pub fn from_quaternion(q: [f64; 4], t: Vector3<f64>) -> Result<Self> {
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n > 1e-12) {
            return Err(Error::Degenerate("zero quaternion".into()));
        }
        let [w, x, y, z] = q.map(|c| c / n);
        let r = Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        );
        Ok(Self { r, t })
    }

    /// `[w, x, y, z]` with `w ≥ 0`.
    pub fn quaternion(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.r));
        let c = q.into_inner().coords; // (x, y, z, w)
        let s = if c.w < 0.0 { -1.0 } else { 1.0 };
        [s * c.w, s * c.x, s * c.y, s * c.z]
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.r * p + self.t
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.r.transpose();
        Pose {
            r: rt,
            t: -(rt * self.t),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            r: self.r * other.r,
            t: self.r * other.t + self.t,
        }
    }

    pub fn to_record(&self) -> PoseRecord {
        PoseRecord {
            rotation: [
                self.r[(0, 0)],
                self.r[(0, 1)],
                self.r[(0, 2)],
                self.r[(1, 0)],
                self.r[(1, 1)],
                self.r[(1, 2)],
                self.r[(2, 0)],
                self.r[(2, 1)],
                self.r[(2, 2)],
            ],
            quaternion: self.quaternion(),
            translation: [self.t.x, self.t.y, self.t.z],
        }
    }
}

/// JSON form of a pose: row-major rotation, `[w, x, y, z]` quaternion, meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub rotation: [f64; 9],
    pub quaternion: [f64; 4],
    pub translation: [f64; 3],
}

impl PoseRecord {
    /// Rebuilds the pose from the rotation matrix, checking it to `tol`.
    pub fn to_pose(&self, tol: f64) -> Result<Pose> {
        let r = Matrix3::from_row_slice(&self.rotation);
        Pose::new(r, Vector3::from(self.translation), tol)
    }
}

/// Fails unless `RᵀR = I` and `det R = +1` to `tol`.
pub fn check_rotation(r: &Matrix3<f64>, tol: f64) -> Result<()> {
    if !r.iter().all(|x| x.is_finite()) {
        return Err(Error::NotRotation("non-finite entries".into()));
    }
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = r.determinant();
    if ortho > tol || (det - 1.0).abs() > tol {
        return Err(Error::NotRotation(format!(
            "|RᵀR − I| = {ortho:.3e}, det = {det:.12}"
        )));
    }
    Ok(())
}

/// Rotation by `angle` about a unit `axis` (Rodrigues).
pub fn rodrigues(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let k = axis.normalize();
    let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
}
