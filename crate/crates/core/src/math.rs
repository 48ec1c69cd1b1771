//! Small rotation helpers shared by the kinematics modules.

use nalgebra::{Isometry3, Matrix3, Rotation3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

#[inline]
pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

#[inline]
pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// d/da of `rot_y(a)`.
#[inline]
pub fn drot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

/// d/da of `rot_z(a)`.
#[inline]
pub fn drot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// Rodrigues rotation about a unit axis.
pub fn rot_axis(axis: &Vector3<f64>, a: f64) -> Matrix3<f64> {
    let k = axis.cross_matrix();
    let (s, c) = a.sin_cos();
    Matrix3::identity() + k * s + k * k * (1.0 - c)
}

/// A rigid transform as it appears in configuration files.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub translation_m: [f64; 3],
    /// Roll, pitch, yaw applied as `Rz(yaw) * Ry(pitch) * Rx(roll)`.
    pub rotation_rpy_rad: [f64; 3],
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self {
            translation_m: [0.0; 3],
            rotation_rpy_rad: [0.0; 3],
        }
    }
}

impl RigidTransform {
    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        let (r, p, y) = iso.rotation.euler_angles();
        let t = iso.translation.vector;
        Self {
            translation_m: [t.x, t.y, t.z],
            rotation_rpy_rad: [r, p, y],
        }
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        let [x, y, z] = self.translation_m;
        let [r, p, yw] = self.rotation_rpy_rad;
        Isometry3::from_parts(
            Translation3::new(x, y, z),
            UnitQuaternion::from_euler_angles(r, p, yw),
        )
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let [r, p, y] = self.rotation_rpy_rad;
        *Rotation3::from_euler_angles(r, p, y).matrix()
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::from(self.translation_m)
    }
}

/// `true` when `m` is orthonormal with determinant +1.
pub fn is_rotation(m: &Matrix3<f64>, tol: f64) -> bool {
    let ortho = (m.transpose() * m - Matrix3::identity()).abs().max() <= tol;
    ortho && (m.determinant() - 1.0).abs() <= tol
}

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut w = a.rem_euclid(two_pi);
    if w > std::f64::consts::PI {
        w -= two_pi;
    }
    w
}
