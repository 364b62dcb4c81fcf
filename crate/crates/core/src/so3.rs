//! Axis-angle rotation helpers.

use nalgebra::{Matrix3, Rotation3, Vector3};
use std::f64::consts::PI;

/// Below this angle the closed forms are replaced by their Taylor series.
pub const SMALL_ANGLE: f64 = 1e-7;

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula.
pub fn exp(aa: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = aa.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(aa);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Left Jacobian of SO(3): `exp(aa + d) ≈ exp(J_l(aa) d) · exp(aa)` to first order.
pub fn left_jacobian(aa: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = aa.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(aa);
    let (a, b) = if theta < SMALL_ANGLE {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Rotation matrix to axis-angle, norm in `[0, π]`.
pub fn log(r: &Matrix3<f64>) -> Vector3<f64> {
    Rotation3::from_matrix_unchecked(*r).scaled_axis()
}

/// Maps an axis-angle vector to the equivalent one with norm ≤ π.
pub fn canonicalize(aa: &Vector3<f64>) -> Vector3<f64> {
    let theta = aa.norm();
    if theta <= PI {
        return *aa;
    }
    let wrapped = theta - 2.0 * PI * (theta / (2.0 * PI)).round();
    aa * (wrapped / theta)
}

/// True when `r` is orthonormal with determinant +1, to within `tol`.
pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    err <= tol && (r.determinant() - 1.0).abs() <= tol
}
