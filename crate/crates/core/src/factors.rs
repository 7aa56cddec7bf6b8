//! Residuals and analytic Jacobians for the visual reprojection factor and
//! the two camera-ground constraint factors, plus robust-kernel weighting
//! and the slope-change cut-off gate.

use nalgebra::{Matrix2x3, Matrix3, RowVector3, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

use crate::geometry::{
    cg_rotation, cg_rotation_dalpha, cg_rotation_dtheta, CameraPoint, CgParams,
    NormalizedImagePoint,
};
use crate::imu_preint::NavState;
use crate::quat::skew;

#[derive(Debug, Error, PartialEq)]
pub enum FactorError {
    /// The transformed landmark ended up at or behind the target camera
    /// plane; the factor is disabled for this pair (and reported, not
    /// silently skipped).
    #[error("landmark depth {0:.4} m is not positive in the target frame")]
    NonPositiveDepth(f64),
    #[error("landmark inverse depth {0:.6} must be positive")]
    NonPositiveInverseDepth(f64),
}

/// Inverse-depth landmark anchored to its first observing frame.
#[derive(Debug, Clone, Copy)]
pub struct Landmark {
    pub id: u64,
    pub anchor_frame: usize,
    pub u_anchor: NormalizedImagePoint,
    pub inv_depth: f64,
    pub is_ground: bool,
    pub sigma_lambda: f64,
}

/// IMU-camera extrinsic parameters (camera-to-body).
#[derive(Debug, Clone, Copy)]
pub struct Extrinsics {
    pub r_bc: UnitQuaternion<f64>,
    pub p_bc: Vector3<f64>,
}

impl Extrinsics {
    pub fn identity() -> Self {
        Self { r_bc: UnitQuaternion::identity(), p_bc: Vector3::zeros() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    None,
    Huber,
    Cauchy,
}

/// Robust loss applied to a factor's squared whitened norm.
#[derive(Debug, Clone, Copy)]
pub struct RobustKernel {
    pub kind: KernelKind,
    pub scale: f64,
}

/// Kernel value and derivatives at s = ||r||^2, plus the IRLS weight
/// (= rho').
#[derive(Debug, Clone, Copy)]
pub struct KernelEval {
    pub weight: f64,
    pub rho: f64,
    pub rho_p: f64,
    pub rho_pp: f64,
}

/// Evaluate the robust kernel on a residual's squared norm.
pub fn apply_robust_kernel(squared_norm: f64, k: &RobustKernel) -> KernelEval {
    debug_assert!(k.scale > 0.0);
    let c2 = k.scale * k.scale;
    match k.kind {
        KernelKind::None => KernelEval { weight: 1.0, rho: squared_norm, rho_p: 1.0, rho_pp: 0.0 },
        KernelKind::Huber => {
            if squared_norm <= c2 {
                KernelEval { weight: 1.0, rho: squared_norm, rho_p: 1.0, rho_pp: 0.0 }
            } else {
                let r = squared_norm.sqrt();
                let rho_p = k.scale / r;
                KernelEval {
                    weight: rho_p,
                    rho: 2.0 * k.scale * r - c2,
                    rho_p,
                    rho_pp: -0.5 * k.scale / (squared_norm * r),
                }
            }
        }
        KernelKind::Cauchy => {
            let t = 1.0 + squared_norm / c2;
            KernelEval {
                weight: 1.0 / t,
                rho: c2 * t.ln(),
                rho_p: 1.0 / t,
                rho_pp: -1.0 / (c2 * t * t),
            }
        }
    }
}

/// Slope-change cut-off: keep the camera-ground factor only while its
/// residual at the current linearization stays inside the cutoff.
pub fn slope_gate(r_cg: f64, cutoff: f64) -> bool {
    r_cg.abs() <= cutoff
}

/// Chain of partial derivatives of the target-frame landmark position.
#[derive(Debug, Clone)]
pub struct TransformJacobians {
    pub d_p_i: Matrix3<f64>,
    pub d_theta_i: Matrix3<f64>,
    pub d_p_j: Matrix3<f64>,
    pub d_theta_j: Matrix3<f64>,
    pub d_lambda: Vector3<f64>,
}

/// Transform an anchored landmark into the target camera frame:
/// body_i <- camera via extrinsics, world via x_i, body_j via x_j, camera
/// again via extrinsics. Reduces to u/lambda when i = j.
pub fn transform_anchor_to_target(
    u_anchor: &NormalizedImagePoint,
    lambda: f64,
    x_i: &NavState,
    x_j: &NavState,
    ext: &Extrinsics,
) -> Result<CameraPoint, FactorError> {
    if lambda <= 0.0 {
        return Err(FactorError::NonPositiveInverseDepth(lambda));
    }
    let p_ci = u_anchor.bearing() / lambda;
    let p_bi = ext.r_bc * p_ci + ext.p_bc;
    let p_w = x_i.q * p_bi + x_i.p;
    let p_bj = x_j.q.inverse() * (p_w - x_j.p);
    let p_cj = ext.r_bc.inverse() * (p_bj - ext.p_bc);
    if p_cj.z <= 0.0 {
        return Err(FactorError::NonPositiveDepth(p_cj.z));
    }
    Ok(CameraPoint(p_cj))
}

/// [`transform_anchor_to_target`] plus the partials needed by the visual
/// and cross-frame camera-ground factors.
pub fn transform_with_jacobians(
    u_anchor: &NormalizedImagePoint,
    lambda: f64,
    x_i: &NavState,
    x_j: &NavState,
    ext: &Extrinsics,
) -> Result<(CameraPoint, TransformJacobians), FactorError> {
    if lambda <= 0.0 {
        return Err(FactorError::NonPositiveInverseDepth(lambda));
    }
    let r_bc = ext.r_bc.to_rotation_matrix().into_inner();
    let r_i = x_i.q.to_rotation_matrix().into_inner();
    let r_j_t = x_j.q.to_rotation_matrix().into_inner().transpose();

    let p_ci = u_anchor.bearing() / lambda;
    let p_bi = r_bc * p_ci + ext.p_bc;
    let p_w = r_i * p_bi + x_i.p;
    let p_bj = r_j_t * (p_w - x_j.p);
    let p_cj = r_bc.transpose() * (p_bj - ext.p_bc);
    if p_cj.z <= 0.0 {
        return Err(FactorError::NonPositiveDepth(p_cj.z));
    }

    let b = r_bc.transpose() * r_j_t;
    let jac = TransformJacobians {
        d_p_i: b,
        d_theta_i: -b * r_i * skew(&p_bi),
        d_p_j: -b,
        d_theta_j: r_bc.transpose() * skew(&p_bj),
        d_lambda: b * r_i * r_bc * (-p_ci / lambda),
    };
    Ok((CameraPoint(p_cj), jac))
}

/// Perspective-divided prediction minus the target observation.
pub fn reprojection_residual(
    u_i: &NormalizedImagePoint,
    u_j: &NormalizedImagePoint,
    x_i: &NavState,
    x_j: &NavState,
    lambda: f64,
    ext: &Extrinsics,
) -> Result<Vector2<f64>, FactorError> {
    let p_cj = transform_anchor_to_target(u_i, lambda, x_i, x_j, ext)?.0;
    Ok(Vector2::new(p_cj.x / p_cj.z - u_j.x, p_cj.y / p_cj.z - u_j.y))
}

/// Jacobians of the reprojection residual: 2x6 pose blocks ([dp, dtheta])
/// per state and 2x1 for the inverse depth.
#[derive(Debug, Clone)]
pub struct ReprojectionJacobians {
    pub d_x_i: nalgebra::SMatrix<f64, 2, 6>,
    pub d_x_j: nalgebra::SMatrix<f64, 2, 6>,
    pub d_lambda: Vector2<f64>,
}

pub fn reprojection_with_jacobians(
    u_i: &NormalizedImagePoint,
    u_j: &NormalizedImagePoint,
    x_i: &NavState,
    x_j: &NavState,
    lambda: f64,
    ext: &Extrinsics,
) -> Result<(Vector2<f64>, ReprojectionJacobians), FactorError> {
    let (p_cj, tj) = transform_with_jacobians(u_i, lambda, x_i, x_j, ext)?;
    let p = p_cj.0;
    let r = Vector2::new(p.x / p.z - u_j.x, p.y / p.z - u_j.y);
    let iz = 1.0 / p.z;
    let dproj = Matrix2x3::new(iz, 0.0, -p.x * iz * iz, 0.0, iz, -p.y * iz * iz);

    let mut d_x_i = nalgebra::SMatrix::<f64, 2, 6>::zeros();
    d_x_i.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dproj * tj.d_p_i));
    d_x_i.fixed_view_mut::<2, 3>(0, 3).copy_from(&(dproj * tj.d_theta_i));
    let mut d_x_j = nalgebra::SMatrix::<f64, 2, 6>::zeros();
    d_x_j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dproj * tj.d_p_j));
    d_x_j.fixed_view_mut::<2, 3>(0, 3).copy_from(&(dproj * tj.d_theta_j));

    Ok((r, ReprojectionJacobians { d_x_i, d_x_j, d_lambda: dproj * tj.d_lambda }))
}

fn leveled_y_row(cg: &CgParams, theta_comp: f64) -> (RowVector3<f64>, Matrix3<f64>) {
    let shifted = CgParams { theta: cg.theta + theta_comp, ..*cg };
    let r = cg_rotation(&shifted);
    // (R^T p)_y = (R e_y)^T p
    ((r.column(1)).transpose(), r)
}

/// Same-frame camera-ground residual: h - (R(alpha, theta+comp)^T u/lambda)_y.
pub fn cg_residual_same_frame(
    u_i: &NormalizedImagePoint,
    lambda: f64,
    cg: &CgParams,
    theta_comp: f64,
) -> Result<f64, FactorError> {
    if lambda <= 0.0 {
        return Err(FactorError::NonPositiveInverseDepth(lambda));
    }
    let (g, _) = leveled_y_row(cg, theta_comp);
    Ok(cg.h - (g * (u_i.bearing() / lambda)).x)
}

/// Derivatives of the same-frame camera-ground residual.
#[derive(Debug, Clone, Copy)]
pub struct CgSameFrameJacobians {
    pub d_lambda: f64,
    /// [d/dh, d/dtheta, d/dalpha]
    pub d_cg: RowVector3<f64>,
}

pub fn cg_same_frame_with_jacobians(
    u_i: &NormalizedImagePoint,
    lambda: f64,
    cg: &CgParams,
    theta_comp: f64,
) -> Result<(f64, CgSameFrameJacobians), FactorError> {
    if lambda <= 0.0 {
        return Err(FactorError::NonPositiveInverseDepth(lambda));
    }
    let shifted = CgParams { theta: cg.theta + theta_comp, ..*cg };
    let g = cg_rotation(&shifted).column(1).transpose();
    let p = u_i.bearing() / lambda;
    let r = cg.h - (g * p).x;
    let d_theta = -(cg_rotation_dtheta(&shifted).column(1).transpose() * p).x;
    let d_alpha = -(cg_rotation_dalpha(&shifted).column(1).transpose() * p).x;
    Ok((
        r,
        CgSameFrameJacobians {
            d_lambda: (g * p).x / lambda,
            d_cg: RowVector3::new(1.0, d_theta, d_alpha),
        },
    ))
}

/// Cross-frame camera-ground residual: h - (R^T p^{c_j}_f)_y.
pub fn cg_residual_cross_frame(
    u_i: &NormalizedImagePoint,
    lambda: f64,
    x_i: &NavState,
    x_j: &NavState,
    cg: &CgParams,
    theta_comp_j: f64,
    ext: &Extrinsics,
) -> Result<f64, FactorError> {
    let p_cj = transform_anchor_to_target(u_i, lambda, x_i, x_j, ext)?.0;
    let (g, _) = leveled_y_row(cg, theta_comp_j);
    Ok(cg.h - (g * p_cj).x)
}

/// Derivatives of the cross-frame camera-ground residual.
#[derive(Debug, Clone)]
pub struct CgCrossFrameJacobians {
    pub d_x_i: nalgebra::SMatrix<f64, 1, 6>,
    pub d_x_j: nalgebra::SMatrix<f64, 1, 6>,
    pub d_lambda: f64,
    pub d_cg: RowVector3<f64>,
}

pub fn cg_cross_frame_with_jacobians(
    u_i: &NormalizedImagePoint,
    lambda: f64,
    x_i: &NavState,
    x_j: &NavState,
    cg: &CgParams,
    theta_comp_j: f64,
    ext: &Extrinsics,
) -> Result<(f64, CgCrossFrameJacobians), FactorError> {
    let (p_cj, tj) = transform_with_jacobians(u_i, lambda, x_i, x_j, ext)?;
    let p = p_cj.0;
    let shifted = CgParams { theta: cg.theta + theta_comp_j, ..*cg };
    let g = cg_rotation(&shifted).column(1).transpose();
    let r = cg.h - (g * p).x;

    let mut d_x_i = nalgebra::SMatrix::<f64, 1, 6>::zeros();
    d_x_i.fixed_view_mut::<1, 3>(0, 0).copy_from(&(-g * tj.d_p_i));
    d_x_i.fixed_view_mut::<1, 3>(0, 3).copy_from(&(-g * tj.d_theta_i));
    let mut d_x_j = nalgebra::SMatrix::<f64, 1, 6>::zeros();
    d_x_j.fixed_view_mut::<1, 3>(0, 0).copy_from(&(-g * tj.d_p_j));
    d_x_j.fixed_view_mut::<1, 3>(0, 3).copy_from(&(-g * tj.d_theta_j));

    let d_theta = -(cg_rotation_dtheta(&shifted).column(1).transpose() * p).x;
    let d_alpha = -(cg_rotation_dalpha(&shifted).column(1).transpose() * p).x;
    Ok((
        r,
        CgCrossFrameJacobians {
            d_x_i,
            d_x_j,
            d_lambda: -(g * tj.d_lambda).x,
            d_cg: RowVector3::new(1.0, d_theta, d_alpha),
        },
    ))
}
