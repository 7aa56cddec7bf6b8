//! Smooth analytic vehicle trajectory: keyframed speed/heading schedules
//! blended C2-continuously, optional slope profile along a straight
//! corridor, and a pitch vibration term, integrated at IMU rate.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{Keyframes, SimConfig};
use crate::factors::Extrinsics;
use crate::geometry::CgParams;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("slope scenarios require a constant heading schedule")]
    SlopeWithTurns,
    #[error("schedule must contain at least one keyframe")]
    EmptySchedule,
}

/// Ground-truth vehicle state at one IMU epoch.
#[derive(Debug, Clone, Copy)]
pub struct GtState {
    pub t: f64,
    /// Body position in the world frame (z-up).
    pub p: Vector3<f64>,
    /// Body attitude (body-to-world).
    pub q: UnitQuaternion<f64>,
    pub v: Vector3<f64>,
    /// World-frame linear acceleration (excluding gravity).
    pub a_w: Vector3<f64>,
    /// Body-frame angular rate.
    pub omega_b: Vector3<f64>,
    /// Arc length traveled, meters.
    pub s: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    /// States at IMU rate (uniform dt = 1/imu_rate).
    pub states: Vec<GtState>,
    /// Indices into `states` at camera epochs.
    pub cam_indices: Vec<usize>,
    pub dt: f64,
}

/// C2 quintic smoothstep and its first two derivatives on [0, 1].
fn smoothstep(s: f64) -> (f64, f64, f64) {
    let s2 = s * s;
    let s3 = s2 * s;
    (
        s3 * (6.0 * s2 - 15.0 * s + 10.0),
        s2 * (30.0 * s2 - 60.0 * s + 30.0),
        s * (120.0 * s2 - 180.0 * s + 60.0),
    )
}

/// Evaluate a keyframed schedule: value, first, and second time derivative.
pub(crate) fn schedule(kf: &Keyframes, t: f64) -> (f64, f64, f64) {
    let k = &kf.0;
    if t <= k[0].0 || k.len() == 1 {
        return (k[0].1, 0.0, 0.0);
    }
    if t >= k[k.len() - 1].0 {
        return (k[k.len() - 1].1, 0.0, 0.0);
    }
    let i = k.partition_point(|&(kt, _)| kt <= t) - 1;
    let (t0, v0) = k[i];
    let (t1, v1) = k[i + 1];
    let span = t1 - t0;
    let (w, wp, wpp) = smoothstep((t - t0) / span);
    (
        v0 + (v1 - v0) * w,
        (v1 - v0) * wp / span,
        (v1 - v0) * wpp / (span * span),
    )
}

/// Deterministic band-limited vibration: main sinusoid plus a few seeded
/// low-frequency harmonics. Returns (angle, rate) in radians.
#[derive(Debug, Clone)]
pub(crate) struct Vibration {
    terms: Vec<(f64, f64, f64)>, // (amplitude rad, omega rad/s, phase)
}

impl Vibration {
    pub fn new(cfg: &SimConfig) -> Self {
        let mut terms = Vec::new();
        if cfg.vib_amp_deg > 0.0 {
            terms.push((
                cfg.vib_amp_deg.to_radians(),
                2.0 * std::f64::consts::PI * cfg.vib_freq_hz,
                0.0,
            ));
        }
        if cfg.vib_noise_amp_deg > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7669_6272); // "vibr"
            let n = 4;
            let amp = cfg.vib_noise_amp_deg.to_radians() / (n as f64).sqrt();
            for _ in 0..n {
                terms.push((
                    amp,
                    2.0 * std::f64::consts::PI * rng.gen_range(0.4..3.0),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                ));
            }
        }
        Self { terms }
    }

    pub fn eval(&self, t: f64) -> (f64, f64) {
        let mut a = 0.0;
        let mut r = 0.0;
        for &(amp, w, ph) in &self.terms {
            a += amp * (w * t + ph).sin();
            r += amp * w * (w * t + ph).cos();
        }
        (a, r)
    }
}

/// Grade angle gamma(x) with a C2 blend through the crest, plus
/// d(gamma)/dx. Keyed on horizontal position x (slope corridors are
/// straight along +x).
pub(crate) fn grade(cfg: &SimConfig, x: f64) -> (f64, f64) {
    if cfg.slope_crest_s_m < 0.0 || cfg.slope_angle_deg == 0.0 {
        return (0.0, 0.0);
    }
    let g = cfg.slope_angle_deg.to_radians();
    let half = cfg.slope_blend_m / 2.0;
    let lo = cfg.slope_crest_s_m - half;
    if x <= lo {
        (0.0, 0.0)
    } else if x >= cfg.slope_crest_s_m + half {
        (g, 0.0)
    } else {
        let (w, wp, _) = smoothstep((x - lo) / cfg.slope_blend_m);
        (g * w, g * wp / cfg.slope_blend_m)
    }
}

/// The exact piecewise-planar ground elevation at horizontal position x
/// (valid for straight slope corridors).
pub(crate) fn ground_elevation(cfg: &SimConfig, x: f64) -> f64 {
    if cfg.slope_crest_s_m >= 0.0 && x > cfg.slope_crest_s_m {
        (x - cfg.slope_crest_s_m) * cfg.slope_angle_deg.to_radians().tan()
    } else {
        0.0
    }
}

/// Body attitude from heading and nose-up pitch.
fn attitude(psi: f64, pitch: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::z_axis(), psi)
        * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), -pitch)
}

/// Nominal camera mounting: camera x right, y down, z forward in a body
/// frame with x forward, y left, z up.
pub fn nominal_r_bc() -> Matrix3<f64> {
    Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0)
}

/// Camera extrinsics realizing the requested level-ground camera-ground
/// parameters: height above the body origin (which rides on the ground)
/// and mounting pitch/roll offsets.
pub fn camera_extrinsics(cg: &CgParams, lever_x: f64) -> Extrinsics {
    let r = nominal_r_bc()
        * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), -cg.theta).to_rotation_matrix().into_inner()
        * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), -cg.alpha).to_rotation_matrix().into_inner();
    Extrinsics {
        r_bc: UnitQuaternion::from_matrix(&r),
        p_bc: Vector3::new(lever_x, 0.0, cg.h),
    }
}

pub fn generate_trajectory(cfg: &SimConfig) -> Result<Trajectory, TrajectoryError> {
    if cfg.speed_keyframes.0.is_empty() || cfg.heading_keyframes_deg.0.is_empty() {
        return Err(TrajectoryError::EmptySchedule);
    }
    let turning = cfg
        .heading_keyframes_deg
        .0
        .iter()
        .any(|&(_, v)| v != cfg.heading_keyframes_deg.0[0].1);
    if cfg.slope_crest_s_m >= 0.0 && cfg.slope_angle_deg != 0.0 && turning {
        return Err(TrajectoryError::SlopeWithTurns);
    }

    let vib = Vibration::new(cfg);
    let dt = 1.0 / cfg.imu_rate_hz;
    let n = (cfg.duration_s * cfg.imu_rate_hz).round() as usize + 1;
    let cam_stride = (cfg.imu_rate_hz / cfg.cam_rate_hz).round() as usize;

    let speed = |t: f64| schedule(&cfg.speed_keyframes, t);
    let heading = |t: f64| {
        let (v, vp, vpp) = schedule(&cfg.heading_keyframes_deg, t);
        (v.to_radians(), vp.to_radians(), vpp.to_radians())
    };

    // Integrate (x, y, z, s) with RK4 over the analytic velocity field.
    let deriv = |t: f64, x: f64| -> Vector3<f64> {
        let (v, _, _) = speed(t);
        let (psi, _, _) = heading(t);
        let (gam, _) = grade(cfg, x);
        // Components: (dx, dy, ds); dz is integrated separately below.
        Vector3::new(v * gam.cos() * psi.cos(), v * gam.cos() * psi.sin(), v)
    };

    let mut states = Vec::with_capacity(n);
    let mut cam_indices = Vec::new();
    let mut x = 0.0;
    let mut y = 0.0;
    let mut z = 0.0;
    let mut s = 0.0;

    for i in 0..n {
        let t = i as f64 * dt;
        let (v, vdot, _) = speed(t);
        let (psi, psidot, _) = heading(t);
        let (gam, dgam_dx) = grade(cfg, x);
        let (vib_a, vib_r) = vib.eval(t);

        let pitch = gam + vib_a;
        let q = attitude(psi, pitch);
        let v_w = Vector3::new(v * gam.cos() * psi.cos(), v * gam.cos() * psi.sin(), v * gam.sin());

        // Analytic acceleration of v_w(t) with gamma = gamma(x(t)).
        let gamdot = dgam_dx * v_w.x;
        let a_w = Vector3::new(
            vdot * gam.cos() * psi.cos()
                - v * gam.sin() * gamdot * psi.cos()
                - v * gam.cos() * psi.sin() * psidot,
            vdot * gam.cos() * psi.sin()
                - v * gam.sin() * gamdot * psi.sin()
                + v * gam.cos() * psi.cos() * psidot,
            vdot * gam.sin() + v * gam.cos() * gamdot,
        );

        // omega_b = psidot * Ry(-pitch)^T ez - pitchdot * ey.
        let pitchdot = gamdot + vib_r;
        let ry_t = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), -pitch).inverse();
        let omega_b = ry_t * (Vector3::z() * psidot) + Vector3::new(0.0, -pitchdot, 0.0);

        states.push(GtState { t, p: Vector3::new(x, y, z), q, v: v_w, a_w, omega_b, s });
        if i % cam_stride == 0 {
            cam_indices.push(i);
        }

        // RK4 step for (x, y, s); z follows dx analytically via gamma.
        let k1 = deriv(t, x);
        let k2 = deriv(t + dt / 2.0, x + k1.x * dt / 2.0);
        let k3 = deriv(t + dt / 2.0, x + k2.x * dt / 2.0);
        let k4 = deriv(t + dt, x + k3.x * dt);
        let step = (k1 + 2.0 * k2 + 2.0 * k3 + k4) * (dt / 6.0);
        // dz = v*sin(gamma) dt, integrated with the same RK4 weights.
        let zs = |tt: f64, xx: f64| {
            let (vv, _, _) = speed(tt);
            let (gg, _) = grade(cfg, xx);
            vv * gg.sin()
        };
        z += (zs(t, x)
            + 2.0 * zs(t + dt / 2.0, x + k1.x * dt / 2.0)
            + 2.0 * zs(t + dt / 2.0, x + k2.x * dt / 2.0)
            + zs(t + dt, x + k3.x * dt))
            * (dt / 6.0);
        x += step.x;
        y += step.y;
        s += step.z;
    }

    Ok(Trajectory { states, cam_indices, dt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn straight_cfg() -> SimConfig {
        SimConfig {
            duration_s: 20.0,
            speed_keyframes: Keyframes(vec![(0.0, 5.0)]),
            heading_keyframes_deg: Keyframes(vec![(0.0, 0.0)]),
            vib_noise_amp_deg: 0.0,
            ..SimConfig::default()
        }
    }

    #[test]
    fn straight_constant_speed_has_no_lateral_accel() {
        let traj = generate_trajectory(&straight_cfg()).unwrap();
        for st in &traj.states {
            assert!(st.a_w.norm() < 1e-12, "accel {:?}", st.a_w);
            // Pitch is the vibration term only.
            let pitch = st.q.to_rotation_matrix().into_inner()[(2, 0)].asin();
            let expected = 0.5f64.to_radians()
                * (2.0 * std::f64::consts::PI * 2.0 * st.t).sin();
            assert_relative_eq!(pitch, expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn turn_produces_centripetal_acceleration() {
        // 5 m/s, yaw rate chosen for a 10 m radius: psidot = v/r = 0.5 rad/s.
        // A long linear heading ramp has near-constant rate in its middle.
        let mut cfg = straight_cfg();
        cfg.vib_amp_deg = 0.0;
        let rate_deg = 0.5f64.to_degrees();
        cfg.heading_keyframes_deg =
            Keyframes(vec![(0.0, 0.0), (16.0, 16.0 * rate_deg)]);
        let traj = generate_trajectory(&cfg).unwrap();
        // The smoothstep rate varies along the ramp; sample where the local
        // yaw rate is closest to the target.
        let st = traj
            .states
            .iter()
            .min_by(|a, b| {
                let ra = (a.omega_b.z - 0.5).abs();
                let rb = (b.omega_b.z - 0.5).abs();
                ra.partial_cmp(&rb).unwrap()
            })
            .unwrap();
        assert_relative_eq!(st.a_w.norm(), 2.5, epsilon = 0.05);
        // Centripetal: perpendicular to velocity.
        assert!(st.a_w.dot(&st.v).abs() < 0.05 * st.a_w.norm() * st.v.norm());
    }

    #[test]
    fn position_derivative_matches_velocity() {
        let mut cfg = straight_cfg();
        cfg.heading_keyframes_deg = Keyframes(vec![(0.0, 0.0), (6.0, 45.0), (14.0, -30.0)]);
        cfg.speed_keyframes = Keyframes(vec![(0.0, 0.0), (4.0, 9.0), (12.0, 3.0)]);
        let traj = generate_trajectory(&cfg).unwrap();
        // Five-point central stencil: O(dt^4) truncation error.
        for w in traj.states.windows(5) {
            let num = (w[0].p - 8.0 * w[1].p + 8.0 * w[3].p - w[4].p) / (12.0 * traj.dt);
            assert!((num - w[2].v).norm() < 1e-6, "fd {:?} vs {:?}", num, w[2].v);
        }
    }

    #[test]
    fn velocity_derivative_matches_acceleration() {
        let mut cfg = straight_cfg();
        cfg.speed_keyframes = Keyframes(vec![(0.0, 0.0), (4.0, 9.0)]);
        cfg.heading_keyframes_deg = Keyframes(vec![(0.0, 0.0), (8.0, 60.0)]);
        cfg.slope_crest_s_m = 40.0;
        cfg.slope_angle_deg = 0.0; // keep straight-corridor restriction moot
        let traj = generate_trajectory(&cfg).unwrap();
        for w in traj.states.windows(5) {
            let num = (w[0].v - 8.0 * w[1].v + 8.0 * w[3].v - w[4].v) / (12.0 * traj.dt);
            // The quintic blends have a third-derivative jump at each knot,
            // which limits stencil accuracy right at the knots.
            assert!((num - w[2].a_w).norm() < 1e-4, "fd {:?} vs {:?}", num, w[2].a_w);
        }
    }

    #[test]
    fn attitude_derivative_matches_angular_rate() {
        let mut cfg = straight_cfg();
        cfg.heading_keyframes_deg = Keyframes(vec![(0.0, 0.0), (8.0, 90.0)]);
        let traj = generate_trajectory(&cfg).unwrap();
        for w in traj.states.windows(5) {
            let f = |k: usize| (w[2].q.inverse() * w[k].q).scaled_axis();
            let num = (f(0) - 8.0 * f(1) + 8.0 * f(3) - f(4)) / (12.0 * traj.dt);
            assert!((num - w[2].omega_b).norm() < 1e-4, "fd {:?} vs {:?}", num, w[2].omega_b);
        }
    }

    #[test]
    fn slope_lifts_elevation_after_crest() {
        let mut cfg = straight_cfg();
        cfg.vib_amp_deg = 0.0;
        cfg.vib_noise_amp_deg = 0.0;
        cfg.slope_crest_s_m = 40.0;
        cfg.slope_angle_deg = 3.0;
        cfg.duration_s = 30.0;
        let traj = generate_trajectory(&cfg).unwrap();
        let last = traj.states.last().unwrap();
        assert!(last.s > 100.0);
        assert!(last.p.z > 2.0, "z = {}", last.p.z);
        // Far past the blend the body rides the exact plane.
        let expect = ground_elevation(&cfg, last.p.x);
        assert!((last.p.z - expect).abs() < 0.05, "{} vs {}", last.p.z, expect);
    }

    #[test]
    fn slope_with_turns_rejected() {
        let mut cfg = straight_cfg();
        cfg.slope_crest_s_m = 40.0;
        cfg.slope_angle_deg = 3.0;
        cfg.heading_keyframes_deg = Keyframes(vec![(0.0, 0.0), (5.0, 90.0)]);
        assert!(matches!(generate_trajectory(&cfg), Err(TrajectoryError::SlopeWithTurns)));
    }

    #[test]
    fn extrinsics_realize_requested_cg_on_level_ground() {
        let cg = CgParams::new(1.7803, (-1.151f64).to_radians(), (-0.153f64).to_radians()).unwrap();
        let ext = camera_extrinsics(&cg, 0.8);
        // Level body at origin: camera pose in world.
        let r_wc = ext.r_bc.to_rotation_matrix().into_inner();
        let p_wc = ext.p_bc;
        // Ground plane z=0, normal +z. Down direction in camera frame:
        let m = r_wc.transpose() * Vector3::new(0.0, 0.0, -1.0);
        let theta = m.z.asin();
        let alpha = (-m.x).atan2(m.y);
        assert_relative_eq!(theta, cg.theta, epsilon = 1e-12);
        assert_relative_eq!(alpha, cg.alpha, epsilon = 1e-12);
        assert_relative_eq!(p_wc.z, cg.h, epsilon = 1e-12);
    }
}
