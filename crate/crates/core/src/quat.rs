//! Quaternion helpers shared by the IMU and visual factors.
//!
//! Hamilton convention throughout. When a quaternion is viewed as a
//! 4-vector here the ordering is (x, y, z, w), matching the scalar-last
//! serialization used in the dataset files.

use nalgebra::{Matrix3, Matrix4, UnitQuaternion, Vector3, Vector4};

/// Skew-symmetric matrix such that `skew(a) * b == a.cross(&b)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Quaternion as (x, y, z, w).
pub fn to_vec4(q: &UnitQuaternion<f64>) -> Vector4<f64> {
    Vector4::new(q.i, q.j, q.k, q.w)
}

/// Left-multiplication matrix: `to_vec4(p * q) == left_mat(p) * to_vec4(q)`.
pub fn left_mat(p: &UnitQuaternion<f64>) -> Matrix4<f64> {
    let (x, y, z, w) = (p.i, p.j, p.k, p.w);
    Matrix4::new(
        w, -z, y, x, //
        z, w, -x, y, //
        -y, x, w, z, //
        -x, -y, -z, w,
    )
}

/// Right-multiplication matrix: `to_vec4(p * q) == right_mat(q) * to_vec4(p)`.
pub fn right_mat(q: &UnitQuaternion<f64>) -> Matrix4<f64> {
    let (x, y, z, w) = (q.i, q.j, q.k, q.w);
    Matrix4::new(
        w, z, -y, x, //
        -z, w, x, y, //
        y, -x, w, z, //
        -x, -y, -z, w,
    )
}

/// Exponential map from a rotation vector to a unit quaternion.
pub fn exp_quat(phi: &Vector3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(*phi)
}

/// Log map inverse of [`exp_quat`].
pub fn log_quat(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    q.scaled_axis()
}

/// Right-perturbed composition `q * exp(phi)` used for the error state.
pub fn boxplus(q: &UnitQuaternion<f64>, phi: &Vector3<f64>) -> UnitQuaternion<f64> {
    q * exp_quat(phi)
}

/// Local difference `log(a^-1 * b)`, inverse of [`boxplus`].
pub fn boxminus(b: &UnitQuaternion<f64>, a: &UnitQuaternion<f64>) -> Vector3<f64> {
    log_quat(&(a.inverse() * b))
}
