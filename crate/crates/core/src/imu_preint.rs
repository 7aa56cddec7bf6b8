//! IMU preintegration between camera frames: midpoint integration of the
//! delta terms, first-order bias Jacobians, discrete covariance
//! propagation and the 15-dimensional preintegration factor residual.

use nalgebra::{Matrix3, SMatrix, SVector, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quat::{boxplus, exp_quat, left_mat, right_mat, skew};

pub type Vector15 = SVector<f64, 15>;
pub type Matrix15 = SMatrix<f64, 15, 15>;

/// World gravity, z-up.
pub const GRAVITY: Vector3<f64> = Vector3::new(0.0, 0.0, -9.80665);

/// Error-state slot offsets shared by the residual and the estimator:
/// [dp, dtheta, dv, dba, dbg].
pub const DP: usize = 0;
pub const DTHETA: usize = 3;
pub const DV: usize = 6;
pub const DBA: usize = 9;
pub const DBG: usize = 12;

#[derive(Debug, Error)]
pub enum ImuError {
    #[error("preintegration needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("non-monotonic IMU timestamps at t = {0}")]
    NonMonotonicTimestamps(f64),
    #[error("IMU sample interval {0:.4} s exceeds the supported maximum {1:.4} s")]
    IntervalTooLarge(f64, f64),
    #[error("bias change ({0:.4}, {1:.4}) exceeds the first-order correction threshold; re-preintegrate")]
    BiasThresholdExceeded(f64, f64),
}

/// One raw IMU measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

/// Accelerometer/gyroscope bias pair.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BiasPair {
    pub accel: Vector3<f64>,
    pub gyro: Vector3<f64>,
}

/// Continuous-time noise densities (1-sigma).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ImuNoiseConfig {
    /// Accelerometer white noise density, m/s^2/sqrt(Hz).
    pub accel_noise_density: f64,
    /// Gyroscope white noise density, rad/s/sqrt(Hz).
    pub gyro_noise_density: f64,
    /// Accelerometer bias random walk, m/s^2*sqrt(s)^-1.
    pub accel_bias_walk: f64,
    /// Gyroscope bias random walk, rad/s*sqrt(s)^-1.
    pub gyro_bias_walk: f64,
}

impl Default for ImuNoiseConfig {
    fn default() -> Self {
        // VRW 0.12 m/s/sqrt(hr) = 0.002 m/s/sqrt(s); ARW 0.5 deg/sqrt(hr).
        Self {
            accel_noise_density: 0.12 / 60.0,
            gyro_noise_density: 0.5_f64.to_radians() / 60.0,
            accel_bias_walk: 1e-4,
            gyro_bias_walk: 1e-6,
        }
    }
}

/// Per-frame navigation state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavState {
    pub p: Vector3<f64>,
    pub q: UnitQuaternion<f64>,
    pub v: Vector3<f64>,
    pub b_a: Vector3<f64>,
    pub b_g: Vector3<f64>,
}

impl NavState {
    pub fn identity() -> Self {
        Self {
            p: Vector3::zeros(),
            q: UnitQuaternion::identity(),
            v: Vector3::zeros(),
            b_a: Vector3::zeros(),
            b_g: Vector3::zeros(),
        }
    }

    /// Apply an error-state increment [dp, dtheta, dv, dba, dbg].
    pub fn boxplus(&self, delta: &Vector15) -> Self {
        Self {
            p: self.p + delta.fixed_rows::<3>(DP).into_owned(),
            q: boxplus(&self.q, &delta.fixed_rows::<3>(DTHETA).into_owned()),
            v: self.v + delta.fixed_rows::<3>(DV).into_owned(),
            b_a: self.b_a + delta.fixed_rows::<3>(DBA).into_owned(),
            b_g: self.b_g + delta.fixed_rows::<3>(DBG).into_owned(),
        }
    }

    /// Error-state difference `self boxminus other`.
    pub fn boxminus(&self, other: &Self) -> Vector15 {
        let mut d = Vector15::zeros();
        d.fixed_rows_mut::<3>(DP).copy_from(&(self.p - other.p));
        d.fixed_rows_mut::<3>(DTHETA)
            .copy_from(&crate::quat::boxminus(&self.q, &other.q));
        d.fixed_rows_mut::<3>(DV).copy_from(&(self.v - other.v));
        d.fixed_rows_mut::<3>(DBA).copy_from(&(self.b_a - other.b_a));
        d.fixed_rows_mut::<3>(DBG).copy_from(&(self.b_g - other.b_g));
        d
    }
}

/// Preintegrated IMU deltas over one frame interval, immutable once built.
#[derive(Debug, Clone)]
pub struct Preintegration {
    pub dt_total: f64,
    pub alpha_hat: Vector3<f64>,
    pub beta_hat: Vector3<f64>,
    pub gamma_hat: UnitQuaternion<f64>,
    pub j_alpha_ba: Matrix3<f64>,
    pub j_alpha_bg: Matrix3<f64>,
    pub j_beta_ba: Matrix3<f64>,
    pub j_beta_bg: Matrix3<f64>,
    pub j_gamma_bg: Matrix3<f64>,
    pub cov: Matrix15,
    pub lin_bias: BiasPair,
}

/// Deltas after first-order bias correction.
#[derive(Debug, Clone, Copy)]
pub struct CorrectedDeltas {
    pub alpha: Vector3<f64>,
    pub beta: Vector3<f64>,
    pub gamma: UnitQuaternion<f64>,
    /// Total bias delta the correction was evaluated at.
    pub delta_bias: BiasPair,
}

/// Thresholds above which first-order bias correction is refused.
pub const BIAS_REPROP_ACCEL: f64 = 0.05;
pub const BIAS_REPROP_GYRO: f64 = 0.01;

const MAX_SAMPLE_INTERVAL: f64 = 0.021;

/// Midpoint-rule preintegration of an IMU batch with bias-corrected
/// measurements, covariance propagation and bias-Jacobian accumulation.
pub fn preintegrate(
    samples: &[ImuSample],
    lin_bias: BiasPair,
    noise: &ImuNoiseConfig,
) -> Result<Preintegration, ImuError> {
    if samples.len() < 2 {
        return Err(ImuError::TooFewSamples(samples.len()));
    }

    let mut alpha = Vector3::zeros();
    let mut beta = Vector3::zeros();
    let mut gamma = UnitQuaternion::identity();
    let mut jac = Matrix15::identity();
    let mut cov = Matrix15::zeros();
    let mut dt_total = 0.0;

    for pair in samples.windows(2) {
        let (s0, s1) = (&pair[0], &pair[1]);
        let dt = s1.t - s0.t;
        if dt <= 0.0 {
            return Err(ImuError::NonMonotonicTimestamps(s1.t));
        }
        if dt > MAX_SAMPLE_INTERVAL {
            return Err(ImuError::IntervalTooLarge(dt, MAX_SAMPLE_INTERVAL));
        }

        let w_mid = 0.5 * (s0.gyro + s1.gyro) - lin_bias.gyro;
        let a0 = s0.accel - lin_bias.accel;
        let a1 = s1.accel - lin_bias.accel;

        let r0 = gamma.to_rotation_matrix().into_inner();
        let gamma_next = boxplus(&gamma, &(w_mid * dt));
        let r1 = gamma_next.to_rotation_matrix().into_inner();

        let a_mid = 0.5 * (r0 * a0 + r1 * a1);
        let alpha_next = alpha + beta * dt + 0.5 * a_mid * dt * dt;
        let beta_next = beta + a_mid * dt;

        // Discrete error-state transition (midpoint form).
        let wx = skew(&w_mid);
        let a0x = skew(&a0);
        let a1x = skew(&a1);
        let i3 = Matrix3::identity();
        let dt2 = dt * dt;

        let mut f = Matrix15::identity();
        let f_theta_theta = i3 - wx * dt;
        f.fixed_view_mut::<3, 3>(DP, DTHETA).copy_from(
            &(-0.25 * r0 * a0x * dt2 - 0.25 * r1 * a1x * f_theta_theta * dt2),
        );
        f.fixed_view_mut::<3, 3>(DP, DV).copy_from(&(i3 * dt));
        f.fixed_view_mut::<3, 3>(DP, DBA).copy_from(&(-0.25 * (r0 + r1) * dt2));
        f.fixed_view_mut::<3, 3>(DP, DBG).copy_from(&(0.25 * r1 * a1x * dt2 * dt));
        f.fixed_view_mut::<3, 3>(DTHETA, DTHETA).copy_from(&f_theta_theta);
        f.fixed_view_mut::<3, 3>(DTHETA, DBG).copy_from(&(-i3 * dt));
        f.fixed_view_mut::<3, 3>(DV, DTHETA)
            .copy_from(&(-0.5 * r0 * a0x * dt - 0.5 * r1 * a1x * f_theta_theta * dt));
        f.fixed_view_mut::<3, 3>(DV, DBA).copy_from(&(-0.5 * (r0 + r1) * dt));
        f.fixed_view_mut::<3, 3>(DV, DBG).copy_from(&(0.5 * r1 * a1x * dt2));

        // Noise mapping; the sampled white noise has variance sigma^2 / dt.
        let mut v = SMatrix::<f64, 15, 18>::zeros();
        v.fixed_view_mut::<3, 3>(DP, 0).copy_from(&(0.25 * r0 * dt2));
        v.fixed_view_mut::<3, 3>(DP, 3).copy_from(&(-0.125 * r1 * a1x * dt2 * dt));
        v.fixed_view_mut::<3, 3>(DP, 6).copy_from(&(0.25 * r1 * dt2));
        v.fixed_view_mut::<3, 3>(DP, 9).copy_from(&(-0.125 * r1 * a1x * dt2 * dt));
        v.fixed_view_mut::<3, 3>(DTHETA, 3).copy_from(&(0.5 * i3 * dt));
        v.fixed_view_mut::<3, 3>(DTHETA, 9).copy_from(&(0.5 * i3 * dt));
        v.fixed_view_mut::<3, 3>(DV, 0).copy_from(&(0.5 * r0 * dt));
        v.fixed_view_mut::<3, 3>(DV, 3).copy_from(&(-0.25 * r1 * a1x * dt2));
        v.fixed_view_mut::<3, 3>(DV, 6).copy_from(&(0.5 * r1 * dt));
        v.fixed_view_mut::<3, 3>(DV, 9).copy_from(&(-0.25 * r1 * a1x * dt2));
        v.fixed_view_mut::<3, 3>(DBA, 12).copy_from(&i3);
        v.fixed_view_mut::<3, 3>(DBG, 15).copy_from(&i3);

        let mut q_diag = SVector::<f64, 18>::zeros();
        let sa2 = noise.accel_noise_density.powi(2) / dt;
        let sg2 = noise.gyro_noise_density.powi(2) / dt;
        let swa2 = noise.accel_bias_walk.powi(2) * dt;
        let swg2 = noise.gyro_bias_walk.powi(2) * dt;
        q_diag.fixed_rows_mut::<3>(0).fill(sa2);
        q_diag.fixed_rows_mut::<3>(3).fill(sg2);
        q_diag.fixed_rows_mut::<3>(6).fill(sa2);
        q_diag.fixed_rows_mut::<3>(9).fill(sg2);
        q_diag.fixed_rows_mut::<3>(12).fill(swa2);
        q_diag.fixed_rows_mut::<3>(15).fill(swg2);

        cov = f * cov * f.transpose() + v * SMatrix::from_diagonal(&q_diag) * v.transpose();
        cov = 0.5 * (cov + cov.transpose());
        jac = f * jac;

        alpha = alpha_next;
        beta = beta_next;
        gamma = gamma_next; // from_scaled_axis keeps it normalized
        dt_total += dt;
    }

    Ok(Preintegration {
        dt_total,
        alpha_hat: alpha,
        beta_hat: beta,
        gamma_hat: gamma,
        j_alpha_ba: jac.fixed_view::<3, 3>(DP, DBA).into_owned(),
        j_alpha_bg: jac.fixed_view::<3, 3>(DP, DBG).into_owned(),
        j_beta_ba: jac.fixed_view::<3, 3>(DV, DBA).into_owned(),
        j_beta_bg: jac.fixed_view::<3, 3>(DV, DBG).into_owned(),
        j_gamma_bg: jac.fixed_view::<3, 3>(DTHETA, DBG).into_owned(),
        cov,
        lin_bias,
    })
}

/// First-order bias correction of the deltas, refusing when the bias moved
/// too far from the linearization point.
pub fn correct_for_bias(
    pre: &Preintegration,
    new_bias: &BiasPair,
) -> Result<CorrectedDeltas, ImuError> {
    let dba = new_bias.accel - pre.lin_bias.accel;
    let dbg = new_bias.gyro - pre.lin_bias.gyro;
    if dba.norm() > BIAS_REPROP_ACCEL || dbg.norm() > BIAS_REPROP_GYRO {
        return Err(ImuError::BiasThresholdExceeded(dba.norm(), dbg.norm()));
    }
    Ok(corrected_deltas_unchecked(pre, dba, dbg))
}

fn corrected_deltas_unchecked(
    pre: &Preintegration,
    dba: Vector3<f64>,
    dbg: Vector3<f64>,
) -> CorrectedDeltas {
    CorrectedDeltas {
        alpha: pre.alpha_hat + pre.j_alpha_ba * dba + pre.j_alpha_bg * dbg,
        beta: pre.beta_hat + pre.j_beta_ba * dba + pre.j_beta_bg * dbg,
        gamma: pre.gamma_hat * exp_quat(&(pre.j_gamma_bg * dbg)),
        delta_bias: BiasPair { accel: dba, gyro: dbg },
    }
}

/// Right Jacobian of SO(3).
fn so3_right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let n = phi.norm();
    let px = skew(phi);
    if n < 1e-8 {
        return Matrix3::identity() - 0.5 * px + px * px / 6.0;
    }
    Matrix3::identity() - (1.0 - n.cos()) / (n * n) * px + (n - n.sin()) / (n * n * n) * px * px
}

/// The five stacked residual blocks of the preintegration factor.
pub fn imu_residual(
    pre: &Preintegration,
    x_k: &NavState,
    x_k1: &NavState,
    gravity: &Vector3<f64>,
) -> Vector15 {
    let dba = x_k.b_a - pre.lin_bias.accel;
    let dbg = x_k.b_g - pre.lin_bias.gyro;
    let corr = corrected_deltas_unchecked(pre, dba, dbg);

    let dt = pre.dt_total;
    let r_k_t = x_k.q.to_rotation_matrix().into_inner().transpose();

    let mut r = Vector15::zeros();
    r.fixed_rows_mut::<3>(DP).copy_from(
        &(r_k_t * (x_k1.p - x_k.p - x_k.v * dt - 0.5 * *gravity * dt * dt) - corr.alpha),
    );
    let q_res = x_k.q.inverse() * x_k1.q * corr.gamma.inverse();
    r.fixed_rows_mut::<3>(DTHETA)
        .copy_from(&(2.0 * Vector3::new(q_res.i, q_res.j, q_res.k)));
    r.fixed_rows_mut::<3>(DV)
        .copy_from(&(r_k_t * (x_k1.v - x_k.v - *gravity * dt) - corr.beta));
    r.fixed_rows_mut::<3>(DBA).copy_from(&(x_k1.b_a - x_k.b_a));
    r.fixed_rows_mut::<3>(DBG).copy_from(&(x_k1.b_g - x_k.b_g));
    r
}

/// Analytic Jacobians of [`imu_residual`] with respect to the two states'
/// error vectors.
pub fn imu_residual_jacobians(
    pre: &Preintegration,
    x_k: &NavState,
    x_k1: &NavState,
    gravity: &Vector3<f64>,
) -> (Matrix15, Matrix15) {
    let dbg = x_k.b_g - pre.lin_bias.gyro;
    let dt = pre.dt_total;
    let r_k_t = x_k.q.to_rotation_matrix().into_inner().transpose();
    let i3 = Matrix3::identity();

    let corr_phi = pre.j_gamma_bg * dbg;
    let gamma_corr = pre.gamma_hat * exp_quat(&corr_phi);

    let a = r_k_t * (x_k1.p - x_k.p - x_k.v * dt - 0.5 * *gravity * dt * dt);
    let b = r_k_t * (x_k1.v - x_k.v - *gravity * dt);

    let mut jk = Matrix15::zeros();
    let mut jk1 = Matrix15::zeros();

    // position block
    jk.fixed_view_mut::<3, 3>(DP, DP).copy_from(&(-r_k_t));
    jk.fixed_view_mut::<3, 3>(DP, DTHETA).copy_from(&skew(&a));
    jk.fixed_view_mut::<3, 3>(DP, DV).copy_from(&(-r_k_t * dt));
    jk.fixed_view_mut::<3, 3>(DP, DBA).copy_from(&(-pre.j_alpha_ba));
    jk.fixed_view_mut::<3, 3>(DP, DBG).copy_from(&(-pre.j_alpha_bg));
    jk1.fixed_view_mut::<3, 3>(DP, DP).copy_from(&r_k_t);

    // attitude block: q_res = q_k^-1 * q_k1 * gamma_corr^-1
    let q_rel = x_k.q.inverse() * x_k1.q;
    let q_res0 = q_rel * gamma_corr.inverse();
    let right_res0 = right_mat(&q_res0);
    jk.fixed_view_mut::<3, 3>(DTHETA, DTHETA)
        .copy_from(&(-right_res0.fixed_view::<3, 3>(0, 0).into_owned()));
    let lq = left_mat(&q_rel) * right_mat(&gamma_corr.inverse());
    jk1.fixed_view_mut::<3, 3>(DTHETA, DTHETA)
        .copy_from(&lq.fixed_view::<3, 3>(0, 0).into_owned());
    // d/d(bg): gamma_corr^-1 = Exp(-phi0 - J*dbg) * gamma_hat^-1; the
    // right Jacobian at -phi0 makes this exact to first order even away
    // from the linearization bias.
    let jr = so3_right_jacobian(&(-corr_phi));
    let m = left_mat(&(q_rel * exp_quat(&(-corr_phi)))) * right_mat(&pre.gamma_hat.inverse());
    let m3 = m.fixed_view::<3, 3>(0, 0).into_owned();
    jk.fixed_view_mut::<3, 3>(DTHETA, DBG).copy_from(&(-m3 * jr * pre.j_gamma_bg));

    // velocity block
    jk.fixed_view_mut::<3, 3>(DV, DTHETA).copy_from(&skew(&b));
    jk.fixed_view_mut::<3, 3>(DV, DV).copy_from(&(-r_k_t));
    jk.fixed_view_mut::<3, 3>(DV, DBA).copy_from(&(-pre.j_beta_ba));
    jk.fixed_view_mut::<3, 3>(DV, DBG).copy_from(&(-pre.j_beta_bg));
    jk1.fixed_view_mut::<3, 3>(DV, DV).copy_from(&r_k_t);

    // bias random-walk blocks
    jk.fixed_view_mut::<3, 3>(DBA, DBA).copy_from(&(-i3));
    jk.fixed_view_mut::<3, 3>(DBG, DBG).copy_from(&(-i3));
    jk1.fixed_view_mut::<3, 3>(DBA, DBA).copy_from(&i3);
    jk1.fixed_view_mut::<3, 3>(DBG, DBG).copy_from(&i3);

    (jk, jk1)
}
