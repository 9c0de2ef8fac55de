use nalgebra::{Matrix3, Unit, UnitQuaternion, Vector3};
use std::ops::Mul;

use super::GroupError;

/// Tolerance used when validating orthonormality and determinant.
pub const ROTATION_TOL: f64 = 1e-9;

/// A proper rotation of 3-space stored as a 3x3 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wraps a matrix after checking `mᵀm = I` and `det m = 1`.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GroupError> {
        let ortho = (m.transpose() * m - Matrix3::identity()).norm();
        let det = m.determinant();
        if !m.iter().all(|v| v.is_finite()) || ortho > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(GroupError::NotARotation { ortho_err: ortho, det });
        }
        Ok(Rotation(m))
    }

    /// Wraps a matrix without validation. Callers guarantee the invariants.
    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    /// Rotation by `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let axis = Unit::new_normalize(axis);
        Rotation(*nalgebra::Rotation3::from_axis_angle(&axis, angle).matrix())
    }

    /// Rotation from an axis-angle vector (direction = axis, norm = angle).
    pub fn from_rotvec(v: Vector3<f64>) -> Self {
        Rotation(*nalgebra::Rotation3::new(v).matrix())
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>) -> Self {
        Rotation(*q.to_rotation_matrix().matrix())
    }

    /// Axis-angle vector whose norm is the rotation angle in `[0, π]`.
    pub fn to_rotvec(&self) -> Vector3<f64> {
        nalgebra::Rotation3::from_matrix_unchecked(self.0).scaled_axis()
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    pub fn inverse(&self) -> Rotation {
        self.transpose()
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        angular_distance(&Rotation::identity(), self)
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.0 * p
    }

    /// Row-major entries.
    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 0)], m[(1, 1)], m[(1, 2)], m[(2, 0)], m[(2, 1)], m[(2, 2)]]
    }

    pub fn from_row_major_unchecked(v: &[f64]) -> Rotation {
        Rotation(Matrix3::from_row_slice(&v[..9]))
    }

    pub fn chordal_distance(&self, other: &Rotation) -> f64 {
        (self.0 - other.0).norm()
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<&Rotation> for &Rotation {
    type Output = Rotation;
    fn mul(self, rhs: &Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

/// Geodesic angle between two rotations, `arccos((tr(r1ᵀ r2) - 1) / 2)`.
pub fn angular_distance(r1: &Rotation, r2: &Rotation) -> f64 {
    let tr = (r1.0.transpose() * r2.0).trace();
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}
