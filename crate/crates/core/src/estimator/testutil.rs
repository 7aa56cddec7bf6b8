//! Shared synthetic scene for estimator unit tests: an analytic planar
//! drive with exactly consistent IMU deltas, landmark observations, and
//! camera-ground geometry.

use std::collections::BTreeMap;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::EstimatorConfig;
use crate::estimator::{Observation, SlidingWindow};
use crate::factors::Extrinsics;
use crate::geometry::{CgParams, NormalizedImagePoint};
use crate::imu_preint::{preintegrate, ImuNoiseConfig, ImuSample, NavState};

/// Constant-acceleration straight drive on flat ground with exact IMU.
pub(crate) struct Scene {
    pub(crate) ext: Extrinsics,
    pub(crate) cg: CgParams,
    pub(crate) points: Vec<Vector3<f64>>,
    pub(crate) dt_frame: f64,
}

impl Scene {
    pub(crate) fn new() -> Self {
        // Camera looking forward: nominal body-camera rotation.
        let r_bc = UnitQuaternion::from_rotation_matrix(
            &nalgebra::Rotation3::from_matrix_unchecked(nalgebra::Matrix3::new(
                0.0, 0.0, 1.0,
                -1.0, 0.0, 0.0,
                0.0, -1.0, 0.0,
            )),
        );
        let cg = CgParams { h: 1.6, theta: 0.0, alpha: 0.0 };
        let ext = Extrinsics { r_bc, p_bc: Vector3::new(0.5, 0.0, 1.6) };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut points = Vec::new();
        for _ in 0..40 {
            // Ground points ahead of the vehicle.
            points.push(Vector3::new(
                rng.gen_range(3.0..25.0),
                rng.gen_range(-3.0..3.0),
                0.0,
            ));
        }
        for _ in 0..40 {
            // Structure points off the ground.
            points.push(Vector3::new(
                rng.gen_range(5.0..40.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(1.0..8.0),
            ));
        }
        Self { ext, cg, points, dt_frame: 0.1 }
    }

    pub(crate) fn state(&self, t: f64) -> NavState {
        // Planar arc: accelerating speed along a turning heading. The
        // sustained yaw rate separates roll/pitch from accelerometer
        // bias, which a near-straight segment leaves almost unobservable.
        let a = 0.8;
        let v0 = 3.0;
        let w = 0.6;
        let psi = w * t;
        let speed = v0 + a * t;
        let px = speed * psi.sin() / w + a * (psi.cos() - 1.0) / (w * w);
        let py = -speed * psi.cos() / w + a * psi.sin() / (w * w) + v0 / w;
        NavState {
            p: Vector3::new(px, py, 0.0),
            q: UnitQuaternion::from_axis_angle(&Vector3::z_axis(), psi),
            v: speed * Vector3::new(psi.cos(), psi.sin(), 0.0),
            b_a: Vector3::zeros(),
            b_g: Vector3::zeros(),
        }
    }

    /// Preintegrate finely sampled analytic IMU, then overwrite the
    /// delta terms with their closed-form values so the IMU residual
    /// is exactly zero at the analytic states (covariance and bias
    /// Jacobians keep the integrated values).
    pub(crate) fn imu_between(&self, t0: f64, t1: f64) -> crate::imu_preint::Preintegration {
        let mut samples = Vec::new();
        let n = 20;
        for k in 0..=n {
            let t = t0 + (t1 - t0) * k as f64 / n as f64;
            // Finite-difference specific force/rate from the analytic state.
            let eps = 1e-5;
            let sp = self.state(t + eps);
            let sm = self.state(t - eps);
            let a_w = (sp.v - sm.v) / (2.0 * eps);
            let s = self.state(t);
            let f_b = s.q.inverse() * (a_w - crate::imu_preint::GRAVITY);
            let dq = sm.q.inverse() * sp.q;
            let w_b = dq.scaled_axis() / (2.0 * eps);
            samples.push(ImuSample { t, gyro: w_b, accel: f_b });
        }
        let mut pre = preintegrate(
            &samples,
            crate::imu_preint::BiasPair { accel: Vector3::zeros(), gyro: Vector3::zeros() },
            &ImuNoiseConfig {
                accel_noise_density: 0.01,
                gyro_noise_density: 0.001,
                accel_bias_walk: 1e-4,
                gyro_bias_walk: 1e-6,
            },
        )
        .unwrap();
        let s0 = self.state(t0);
        let s1 = self.state(t1);
        let dt = t1 - t0;
        let g = crate::imu_preint::GRAVITY;
        let r0t = s0.q.inverse();
        pre.alpha_hat = r0t * (s1.p - s0.p - s0.v * dt - 0.5 * g * dt * dt);
        pre.beta_hat = r0t * (s1.v - s0.v - g * dt);
        pre.gamma_hat = s0.q.inverse() * s1.q;
        pre.dt_total = dt;
        pre
    }

    pub(crate) fn observe(&self, t: f64) -> BTreeMap<u64, Observation> {
        let s = self.state(t);
        let r_wc = s.q.to_rotation_matrix().into_inner()
            * self.ext.r_bc.to_rotation_matrix().into_inner();
        let o = s.q * self.ext.p_bc + s.p;
        let mut out = BTreeMap::new();
        for (i, p) in self.points.iter().enumerate() {
            let pc = r_wc.transpose() * (p - o);
            if pc.z < 1.0 {
                continue;
            }
            let u = NormalizedImagePoint::new(pc.x / pc.z, pc.y / pc.z);
            if u.x.abs() > 0.6 || u.y.abs() > 0.45 {
                continue;
            }
            out.insert(
                i as u64,
                Observation { uv: u, is_ground_candidate: p.z == 0.0 },
            );
        }
        out
    }

    pub(crate) fn build_window(&self, n: usize, cfg: EstimatorConfig) -> SlidingWindow {
        let mut w = SlidingWindow::new(cfg, self.ext, 500.0);
        w.push_initial_frame(0.0, self.state(0.0), self.observe(0.0));
        for k in 1..n {
            let t = k as f64 * self.dt_frame;
            let pre = self.imu_between(t - self.dt_frame, t);
            w.add_frame(t, pre, self.observe(t));
            // Keep states exactly on the ground truth for the baseline.
            w.frames.last_mut().unwrap().state = self.state(t);
        }
        // Reset landmarks to exact inverse depths.
        let ids: Vec<u64> = w.landmarks.keys().copied().collect();
        for id in ids {
            let lm = w.landmarks.get_mut(&id).unwrap();
            let slot = w.frames.iter().position(|f| f.id == lm.anchor_id).unwrap();
            let s = self.state(w.frames[slot].t);
            let r_wc = s.q.to_rotation_matrix().into_inner()
                * self.ext.r_bc.to_rotation_matrix().into_inner();
            let o = s.q * self.ext.p_bc + s.p;
            let pc = r_wc.transpose() * (self.points[id as usize] - o);
            lm.inv_depth = 1.0 / pc.z;
        }
        w
    }
}

pub(crate) fn quiet_cfg() -> EstimatorConfig {
    EstimatorConfig { pitch_comp: false, time_budget_ms: 5000.0, ..EstimatorConfig::default() }
}

