//! Deterministic synthetic world: ground points on the piecewise-planar
//! road surface, off-ground structure points, and persistent off-plane
//! outlier tracks inside the ground corridor.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::SimConfig;

use super::trajectory::{ground_elevation, Trajectory};

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("nothing observable: ground and off-ground densities are both zero")]
    NothingObservable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LandmarkClass {
    /// On the road surface exactly.
    Ground,
    /// Structure away from the road (buildings, poles): regular features.
    OffGround,
    /// Low off-plane points inside the road corridor (vehicles, guardrails)
    /// that masquerade as ground features.
    GroundOutlier,
}

#[derive(Debug, Clone, Copy)]
pub struct Landmark3d {
    pub id: u64,
    pub p: Vector3<f64>,
    pub class: LandmarkClass,
}

#[derive(Debug, Clone)]
pub struct WorldModel {
    pub landmarks: Vec<Landmark3d>,
}

/// Place landmarks along the traveled path. Ground points sit exactly on
/// the local plane; off-ground points flank the corridor; outlier points
/// float 0.3-1.5 m above the road inside the corridor.
pub fn generate_world(cfg: &SimConfig, traj: &Trajectory) -> Result<WorldModel, WorldError> {
    if cfg.ground_density_per_100m <= 0.0 && cfg.offground_density_per_100m <= 0.0 {
        return Err(WorldError::NothingObservable);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(7));
    let total_s = traj.states.last().map(|s| s.s).unwrap_or(0.0).max(1.0);
    // Extend past the end so the final frames still see features ahead.
    let total_s = total_s + cfg.roi_forward_m + cfg.offground_dist_max_m;

    // Deterministic counts: density * length, rounded.
    let n_ground = (cfg.ground_density_per_100m * total_s / 100.0).round() as usize;
    let n_off = (cfg.offground_density_per_100m * total_s / 100.0).round() as usize;
    let n_outlier = (cfg.outlier_density_per_100m * total_s / 100.0).round() as usize;

    // Path lookup: piecewise-linear position/heading as a function of s.
    let path = |s_query: f64| -> (Vector3<f64>, f64) {
        let states = &traj.states;
        if s_query >= states.last().unwrap().s {
            // Extrapolate along the final heading.
            let last = states.last().unwrap();
            let psi = last.v.y.atan2(last.v.x);
            let d = s_query - last.s;
            let mut p = last.p + Vector3::new(psi.cos() * d, psi.sin() * d, 0.0);
            // Keep the extrapolated ground consistent with the slope model.
            p.z = ground_elevation(cfg, p.x);
            return (p, psi);
        }
        let i = states.partition_point(|st| st.s <= s_query).min(states.len() - 1);
        let i = i.max(1);
        let (a, b) = (&states[i - 1], &states[i]);
        let w = if b.s > a.s { (s_query - a.s) / (b.s - a.s) } else { 0.0 };
        let p = a.p + (b.p - a.p) * w.clamp(0.0, 1.0);
        let v = a.v + (b.v - a.v) * w.clamp(0.0, 1.0);
        let psi = if v.xy().norm() > 1e-9 { v.y.atan2(v.x) } else { 0.0 };
        (p, psi)
    };

    let mut landmarks = Vec::with_capacity(n_ground + n_off + n_outlier);
    let mut id = 0u64;

    for _ in 0..n_ground {
        let s = rng.gen_range(0.0..total_s);
        let lat = rng.gen_range(-cfg.corridor_half_width_m..cfg.corridor_half_width_m);
        let (p, psi) = path(s);
        let n_hat = Vector3::new(-psi.sin(), psi.cos(), 0.0);
        let mut pt = p + n_hat * lat;
        // Snap exactly onto the local plane (position on path already has
        // blended z; planes are exact functions of horizontal position).
        pt.z = ground_elevation(cfg, pt.x);
        landmarks.push(Landmark3d { id, p: pt, class: LandmarkClass::Ground });
        id += 1;
    }

    for _ in 0..n_off {
        let s = rng.gen_range(0.0..total_s);
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let lat = side * rng.gen_range(cfg.offground_dist_min_m..cfg.offground_dist_max_m);
        let height = rng.gen_range(0.5..cfg.offground_height_max_m);
        let (p, psi) = path(s);
        let n_hat = Vector3::new(-psi.sin(), psi.cos(), 0.0);
        let mut pt = p + n_hat * lat;
        pt.z = ground_elevation(cfg, pt.x) + height;
        landmarks.push(Landmark3d { id, p: pt, class: LandmarkClass::OffGround });
        id += 1;
    }

    for _ in 0..n_outlier {
        let s = rng.gen_range(0.0..total_s);
        let lat = rng.gen_range(-cfg.roi_half_width_m..cfg.roi_half_width_m);
        let height = rng.gen_range(cfg.outlier_height_min_m..cfg.outlier_height_max_m);
        let (p, psi) = path(s);
        let n_hat = Vector3::new(-psi.sin(), psi.cos(), 0.0);
        let mut pt = p + n_hat * lat;
        pt.z = ground_elevation(cfg, pt.x) + height;
        landmarks.push(Landmark3d { id, p: pt, class: LandmarkClass::GroundOutlier });
        id += 1;
    }

    Ok(WorldModel { landmarks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Keyframes;
    use crate::sim::generate_trajectory;

    fn cfg() -> SimConfig {
        SimConfig {
            duration_s: 20.0,
            speed_keyframes: Keyframes(vec![(0.0, 5.0)]),
            heading_keyframes_deg: Keyframes(vec![(0.0, 0.0)]),
            ..SimConfig::default()
        }
    }

    #[test]
    fn deterministic_from_seed() {
        let c = cfg();
        let traj = generate_trajectory(&c).unwrap();
        let w1 = generate_world(&c, &traj).unwrap();
        let w2 = generate_world(&c, &traj).unwrap();
        assert_eq!(w1.landmarks.len(), w2.landmarks.len());
        for (a, b) in w1.landmarks.iter().zip(&w2.landmarks) {
            assert_eq!(a.p, b.p);
            assert_eq!(a.class, b.class);
        }
    }

    #[test]
    fn ground_count_matches_density_exactly() {
        let mut c = cfg();
        c.ground_density_per_100m = 50.0;
        c.offground_density_per_100m = 0.0;
        let traj = generate_trajectory(&c).unwrap();
        let w = generate_world(&c, &traj).unwrap();
        let total = traj.states.last().unwrap().s + c.roi_forward_m + c.offground_dist_max_m;
        let expected = (50.0 * total / 100.0).round() as usize;
        assert_eq!(w.landmarks.len(), expected);
    }

    #[test]
    fn slope_points_satisfy_tilted_plane_exactly() {
        let mut c = cfg();
        c.slope_crest_s_m = 40.0;
        c.slope_angle_deg = 3.0;
        c.duration_s = 30.0;
        let traj = generate_trajectory(&c).unwrap();
        let w = generate_world(&c, &traj).unwrap();
        let tan_g = 3f64.to_radians().tan();
        let mut after = 0;
        for lm in w.landmarks.iter().filter(|l| l.class == LandmarkClass::Ground) {
            // Straight corridor along +x: arc position = x.
            if lm.p.x <= 39.9 {
                assert_eq!(lm.p.z, 0.0);
            } else if lm.p.x >= 40.1 {
                assert!((lm.p.z - (lm.p.x - 40.0) * tan_g).abs() < 1e-9);
                after += 1;
            }
        }
        assert!(after > 10);
    }

    #[test]
    fn empty_world_rejected() {
        let mut c = cfg();
        c.ground_density_per_100m = 0.0;
        c.offground_density_per_100m = 0.0;
        let traj = generate_trajectory(&c).unwrap();
        assert!(matches!(generate_world(&c, &traj), Err(WorldError::NothingObservable)));
    }
}
