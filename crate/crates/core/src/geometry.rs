//! Camera-ground parameterization: the (h, theta, alpha) triplet, plane
//! constraint, inverse-depth recovery, perspective <-> bird's-eye-view
//! mapping, the 1-D scale model and IMU pitch compensation.
//!
//! Camera frame convention: x right, y down, z forward. The ground lies
//! generally below the camera, so the y component of the leveled frame
//! points toward it and h is positive.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Inverse depths at or below this value are treated as horizon /
/// non-ground (max usable ground depth 30 m).
pub const LAMBDA_MIN: f64 = 1.0 / 30.0;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("ray does not intersect visible ground (inverse depth {lambda:.6} <= {min:.6})")]
    Horizon { lambda: f64, min: f64 },
    #[error("point is behind the camera (longitudinal coordinate {y_bev:.3} m <= 0)")]
    BehindCamera { y_bev: f64 },
    #[error("invalid camera-ground parameters: {0}")]
    InvalidCgParams(String),
}

/// The camera-ground triplet: height above the local ground plane plus the
/// two-step rotation (roll about camera z, then pitch about x) that levels
/// the camera's X-Z plane with the ground.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgParams {
    /// Camera-to-ground height, meters. Positive.
    pub h: f64,
    /// Pitch of the two-step rotation, radians.
    pub theta: f64,
    /// Roll of the two-step rotation, radians.
    pub alpha: f64,
}

impl CgParams {
    pub fn new(h: f64, theta: f64, alpha: f64) -> Result<Self, GeometryError> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(GeometryError::InvalidCgParams(format!("h = {h} must be > 0")));
        }
        if theta.abs() >= std::f64::consts::FRAC_PI_2 || alpha.abs() >= std::f64::consts::FRAC_PI_2
        {
            return Err(GeometryError::InvalidCgParams(format!(
                "|theta| = {} and |alpha| = {} must be < pi/2",
                theta.abs(),
                alpha.abs()
            )));
        }
        Ok(Self { h, theta, alpha })
    }
}

/// Point on the normalized image plane (implicit third coordinate 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedImagePoint {
    pub x: f64,
    pub y: f64,
}

impl NormalizedImagePoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Homogeneous bearing [x, y, 1].
    pub fn bearing(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, 1.0)
    }
}

/// Metric ground-plane coordinates: x lateral (right positive), y
/// longitudinal (forward positive), meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevPoint {
    pub x_bev: f64,
    pub y_bev: f64,
}

/// Landmark position in the camera frame, meters. Depth (z) positive for
/// anything actually observed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPoint(pub Vector3<f64>);

/// Two-step leveling rotation R^c_{c_perp}(alpha, theta) = Rz(alpha) * Rx(theta).
pub fn cg_rotation(cg: &CgParams) -> Matrix3<f64> {
    let (sa, ca) = cg.alpha.sin_cos();
    let (st, ct) = cg.theta.sin_cos();
    let rz = Matrix3::new(ca, -sa, 0.0, sa, ca, 0.0, 0.0, 0.0, 1.0);
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, ct, -st, 0.0, st, ct);
    rz * rx
}

/// Derivative of [`cg_rotation`] with respect to theta.
pub fn cg_rotation_dtheta(cg: &CgParams) -> Matrix3<f64> {
    let (sa, ca) = cg.alpha.sin_cos();
    let (st, ct) = cg.theta.sin_cos();
    let rz = Matrix3::new(ca, -sa, 0.0, sa, ca, 0.0, 0.0, 0.0, 1.0);
    let drx = Matrix3::new(0.0, 0.0, 0.0, 0.0, -st, -ct, 0.0, ct, -st);
    rz * drx
}

/// Derivative of [`cg_rotation`] with respect to alpha.
pub fn cg_rotation_dalpha(cg: &CgParams) -> Matrix3<f64> {
    let (sa, ca) = cg.alpha.sin_cos();
    let (st, ct) = cg.theta.sin_cos();
    let drz = Matrix3::new(-sa, -ca, 0.0, ca, -sa, 0.0, 0.0, 0.0, 0.0);
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, ct, -st, 0.0, st, ct);
    drz * rx
}

/// Signed distance of a camera-frame point from the modeled ground plane:
/// `(R^T p)_y - h`. Zero iff the point lies on the plane.
pub fn ground_plane_residual(p_c: &CameraPoint, cg: &CgParams) -> f64 {
    (cg_rotation(cg).transpose() * p_c.0).y - cg.h
}

/// Inverse depth of a ground pixel recovered from the camera-ground
/// geometry: `lambda = (R^T u)_y / h`. May be <= 0 for pixels at or above
/// the horizon; callers that need visible ground use
/// [`ground_inverse_depth`].
pub fn inverse_depth_from_cg(u: &NormalizedImagePoint, cg: &CgParams) -> f64 {
    (cg_rotation(cg).transpose() * u.bearing()).y / cg.h
}

/// [`inverse_depth_from_cg`] with the horizon gate applied.
pub fn ground_inverse_depth(
    u: &NormalizedImagePoint,
    cg: &CgParams,
) -> Result<f64, GeometryError> {
    let lambda = inverse_depth_from_cg(u, cg);
    if lambda <= LAMBDA_MIN {
        Err(GeometryError::Horizon { lambda, min: LAMBDA_MIN })
    } else {
        Ok(lambda)
    }
}

/// Map a normalized image point to metric ground-plane coordinates through
/// the camera-ground geometry.
pub fn perspective_to_bev(
    u: &NormalizedImagePoint,
    cg: &CgParams,
) -> Result<BevPoint, GeometryError> {
    let lambda = ground_inverse_depth(u, cg)?;
    let p_perp = cg_rotation(cg).transpose() * (u.bearing() / lambda);
    Ok(BevPoint { x_bev: p_perp.x, y_bev: p_perp.z })
}

/// Inverse of [`perspective_to_bev`]: metric ground coordinates back to the
/// normalized image plane.
pub fn bev_to_perspective(
    b: &BevPoint,
    cg: &CgParams,
) -> Result<NormalizedImagePoint, GeometryError> {
    if b.y_bev <= 0.0 {
        return Err(GeometryError::BehindCamera { y_bev: b.y_bev });
    }
    let p_c = cg_rotation(cg) * Vector3::new(b.x_bev, cg.h, b.y_bev);
    Ok(NormalizedImagePoint::new(p_c.x / p_c.z, p_c.y / p_c.z))
}

/// Traveled distance from two observations of one ground feature in the
/// 1-D scale model: `h_hat * (1/y_i - 1/y_j)`. Linear in `h_hat`.
pub fn one_d_distance(y_i: f64, y_j: f64, h_hat: f64) -> Result<f64, GeometryError> {
    if y_i <= 0.0 || y_j <= 0.0 {
        return Err(GeometryError::Horizon { lambda: y_i.min(y_j), min: 0.0 });
    }
    Ok(h_hat * (1.0 / y_i - 1.0 / y_j))
}

/// Time-ordered pitch samples covering at most the compensation window.
#[derive(Debug, Clone, Default)]
pub struct PitchHistory {
    samples: Vec<(f64, f64)>,
    window: f64,
}

impl PitchHistory {
    pub fn new(window: f64) -> Self {
        Self { samples: Vec::new(), window }
    }

    /// Append a sample and drop anything older than the window. Samples
    /// must arrive in strictly increasing time order.
    pub fn push(&mut self, t: f64, pitch: f64) {
        if let Some(&(t_last, _)) = self.samples.last() {
            assert!(t > t_last, "pitch history timestamps must be strictly increasing");
        }
        self.samples.push((t, pitch));
        let cutoff = t - self.window;
        self.samples.retain(|&(ts, _)| ts >= cutoff);
    }

    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    pub fn span(&self) -> f64 {
        match (self.samples.first(), self.samples.last()) {
            (Some(&(t0, _)), Some(&(t1, _))) => t1 - t0,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PitchFitStatus {
    Ok,
    /// History too short; compensation is zero.
    InsufficientHistory,
    /// Normal equations singular (e.g. < 3 distinct timestamps).
    Degenerate,
}

#[derive(Debug, Clone, Copy)]
pub struct PitchCompConfig {
    /// Minimum history span before a fit is attempted, seconds.
    pub min_fit_duration: f64,
    /// Minimum number of samples.
    pub min_samples: usize,
    /// Symmetric clamp on the returned compensation, radians.
    pub clamp: f64,
}

impl Default for PitchCompConfig {
    fn default() -> Self {
        Self { min_fit_duration: 1.0, min_samples: 5, clamp: 2.0_f64.to_radians() }
    }
}

/// Fit pitch(t) = a t^2 + b t + c to the history (centered time) and return
/// the deviation of the current pitch from the prediction at `t_now`,
/// clamped to the configured bound.
pub fn pitch_compensation(
    history: &PitchHistory,
    current_pitch: f64,
    t_now: f64,
    cfg: &PitchCompConfig,
) -> (f64, PitchFitStatus) {
    let s = history.samples();
    if s.len() < cfg.min_samples || history.span() < cfg.min_fit_duration {
        return (0.0, PitchFitStatus::InsufficientHistory);
    }
    let t_mid = (s.first().unwrap().0 + s.last().unwrap().0) * 0.5;

    // Normal equations for the quadratic fit in centered time.
    let mut m = nalgebra::Matrix3::<f64>::zeros();
    let mut rhs = Vector3::zeros();
    for &(t, pitch) in s {
        let tc = t - t_mid;
        let basis = Vector3::new(tc * tc, tc, 1.0);
        m += basis * basis.transpose();
        rhs += basis * pitch;
    }
    let coeffs = match m.cholesky() {
        Some(chol) => chol.solve(&rhs),
        None => return (0.0, PitchFitStatus::Degenerate),
    };
    let tc = t_now - t_mid;
    let predicted = coeffs.x * tc * tc + coeffs.y * tc + coeffs.z;
    let comp = (current_pitch - predicted).clamp(-cfg.clamp, cfg.clamp);
    (comp, PitchFitStatus::Ok)
}
