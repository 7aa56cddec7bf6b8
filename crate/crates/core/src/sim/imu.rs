//! IMU measurement synthesis from ground-truth states with configurable
//! random-walk noise densities and constant per-run biases.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::SimConfig;
use crate::imu_preint::{ImuSample, GRAVITY};

use super::trajectory::Trajectory;

const MGAL: f64 = 1e-5; // m/s^2

/// Accelerometer/gyro noise densities in SI units implied by the config.
pub(crate) fn densities(cfg: &SimConfig) -> (f64, f64) {
    (
        cfg.vrw_ms_sqrt_hr / 60.0,                 // m/s/sqrt(s)
        cfg.arw_deg_sqrt_hr.to_radians() / 60.0,   // rad/sqrt(s)
    )
}

/// Constant biases with per-axis seeded signs at the configured magnitude.
pub(crate) fn biases(cfg: &SimConfig) -> (Vector3<f64>, Vector3<f64>) {
    if !cfg.noise_enabled {
        return (Vector3::zeros(), Vector3::zeros());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6269_6173); // "bias"
    let sign = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let ba = cfg.accel_bias_mgal * MGAL;
    let bg = (cfg.gyro_bias_deg_hr / 3600.0).to_radians();
    (
        Vector3::new(sign(&mut rng) * ba, sign(&mut rng) * ba, sign(&mut rng) * ba),
        Vector3::new(sign(&mut rng) * bg, sign(&mut rng) * bg, sign(&mut rng) * bg),
    )
}

/// Synthesize the IMU stream: specific force R^T (a_w - g) + b_a + noise
/// and angular rate omega_b + b_g + noise at the trajectory's IMU rate.
pub fn synthesize_imu(traj: &Trajectory, cfg: &SimConfig) -> Vec<ImuSample> {
    let (vrw, arw) = densities(cfg);
    let (b_a, b_g) = biases(cfg);
    let sqrt_dt = traj.dt.sqrt();
    let (sigma_a, sigma_g) = if cfg.noise_enabled {
        (vrw / sqrt_dt, arw / sqrt_dt)
    } else {
        (0.0, 0.0)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x696D_7531); // "imu1"
    let mut draw = |sigma: f64| -> Vector3<f64> {
        // Always consume randomness so toggling noise doesn't reorder draws.
        let n: [f64; 3] = [
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
        ];
        Vector3::new(n[0], n[1], n[2]) * sigma
    };

    traj.states
        .iter()
        .map(|st| {
            let f_b = st.q.inverse() * (st.a_w - GRAVITY) + b_a + draw(sigma_a);
            let w_b = st.omega_b + b_g + draw(sigma_g);
            ImuSample { t: st.t, gyro: w_b, accel: f_b }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Keyframes;
    use crate::sim::generate_trajectory;
    use approx::assert_relative_eq;

    fn stationary_cfg() -> SimConfig {
        SimConfig {
            duration_s: 300.0,
            speed_keyframes: Keyframes(vec![(0.0, 0.0)]),
            heading_keyframes_deg: Keyframes(vec![(0.0, 0.0)]),
            vib_amp_deg: 0.0,
            vib_noise_amp_deg: 0.0,
            ..SimConfig::default()
        }
    }

    #[test]
    fn noiseless_stationary_reads_reaction_to_gravity() {
        let mut cfg = stationary_cfg();
        cfg.noise_enabled = false;
        cfg.duration_s = 2.0;
        let traj = generate_trajectory(&cfg).unwrap();
        let imu = synthesize_imu(&traj, &cfg);
        for s in &imu {
            assert_relative_eq!(s.accel.z, 9.80665, epsilon = 1e-12);
            assert!(s.accel.xy().norm() < 1e-12);
            assert!(s.gyro.norm() < 1e-12);
        }
    }

    #[test]
    fn white_noise_amplitude_matches_configured_densities() {
        let cfg = stationary_cfg();
        let traj = generate_trajectory(&cfg).unwrap();
        let imu = synthesize_imu(&traj, &cfg);
        let (vrw, arw) = densities(&cfg);
        let (b_a, b_g) = biases(&cfg);
        let n = imu.len() as f64;

        // Empirical std per axis over 300 s at 100 Hz vs sigma = density/sqrt(dt).
        let mut var_a = Vector3::zeros();
        let mut var_g = Vector3::zeros();
        let mean_a = imu.iter().map(|s| s.accel).sum::<Vector3<f64>>() / n;
        let mean_g = imu.iter().map(|s| s.gyro).sum::<Vector3<f64>>() / n;
        for s in &imu {
            var_a += (s.accel - mean_a).map(|x| x * x);
            var_g += (s.gyro - mean_g).map(|x| x * x);
        }
        var_a /= n - 1.0;
        var_g /= n - 1.0;
        let sigma_a = vrw / traj.dt.sqrt();
        let sigma_g = arw / traj.dt.sqrt();
        for k in 0..3 {
            assert!((var_a[k].sqrt() - sigma_a).abs() < 0.1 * sigma_a, "axis {k}");
            assert!((var_g[k].sqrt() - sigma_g).abs() < 0.1 * sigma_g, "axis {k}");
        }

        // Mean error equals the bias plus the gravity reaction.
        let grav = Vector3::new(0.0, 0.0, 9.80665);
        assert!((mean_a - grav - b_a).norm() < 3.0 * sigma_a / n.sqrt() * 3.0_f64.sqrt() + 1e-4);
        assert!((mean_g - b_g).norm() < 3.0 * sigma_g / n.sqrt() * 3.0_f64.sqrt() + 1e-6);
        assert_relative_eq!(b_a.x.abs(), 0.01, epsilon = 1e-12);
        assert_relative_eq!(b_g.x.abs(), (100.0f64 / 3600.0).to_radians(), epsilon = 1e-15);
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = stationary_cfg();
        let traj = generate_trajectory(&cfg).unwrap();
        let a = synthesize_imu(&traj, &cfg);
        let b = synthesize_imu(&traj, &cfg);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.accel, y.accel);
            assert_eq!(x.gyro, y.gyro);
        }
    }
}
