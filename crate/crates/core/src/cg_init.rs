//! Online camera-ground initialization: uncertainty gating of ground
//! landmarks in the sliding window, followed by a small nonlinear
//! least-squares fit of the camera-ground parameters (h, theta, alpha)
//! with all landmark inverse depths held fixed at their current estimates.

use nalgebra::{Matrix3, RowVector3, SymmetricEigen, Vector3};
use thiserror::Error;

use crate::config::EstimatorConfig;
use crate::estimator::SlidingWindow;
use crate::factors::{
    cg_cross_frame_with_jacobians, cg_same_frame_with_jacobians, Extrinsics,
};
use crate::geometry::{CgParams, NormalizedImagePoint};
use crate::imu_preint::NavState;

/// Residual RMS below which an initialization attempt is accepted.
pub const RMS_ACCEPT_M: f64 = 0.05;
/// Stacked observations must span at least this many distinct frames.
pub const MIN_SPAN_FRAMES: usize = 3;
/// Relative eigenvalue floor below which the 3x3 normal matrix is treated
/// as rank-deficient (points collinear in the bird's-eye view).
const DEGENERACY_EIG_RATIO: f64 = 1e-9;
const MAX_ITERATIONS: usize = 50;

/// A ground landmark that passed the depth-uncertainty gate, with every
/// frame it is observed in.
#[derive(Debug, Clone)]
pub struct CgInitCandidate {
    pub id: u64,
    /// (frame slot, observed normalized point); the first entry is the
    /// anchor observation the inverse depth is parameterized in.
    pub obs: Vec<(usize, NormalizedImagePoint)>,
    pub inv_depth: f64,
    pub sigma_lambda: f64,
}

/// Outcome of one initialization attempt.
#[derive(Debug, Clone)]
pub struct CgInitReport {
    pub cg: CgParams,
    /// Root-mean-square of the stacked plane-distance residuals, meters.
    pub rms_m: f64,
    /// Fit quality verdict: `rms_m < RMS_ACCEPT_M`. A rejected fit is
    /// deferred, not fatal.
    pub accepted: bool,
    pub iterations: usize,
    /// Norm of the Gauss-Newton gradient at the returned parameters.
    pub gradient_norm: f64,
    /// Parameter covariance `sigma^2 (J^T J)^{-1}` with sigma the larger
    /// of the fit RMS and the configured ground-measurement sigma.
    pub covariance: Matrix3<f64>,
    pub n_residuals: usize,
    pub n_frames: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum CgInitError {
    #[error("need {need} stacked ground observations, have {have}")]
    TooFewObservations { have: usize, need: usize },
    #[error("observations span {have} frames, need {need}")]
    TooFewFrames { have: usize, need: usize },
    #[error("initialization degenerate: {0}")]
    Degenerate(&'static str),
}

/// Collect ground landmarks whose relative inverse-depth uncertainty
/// `sigma_lambda / lambda` is below the configured gating ratio. Requires
/// marginal covariances from the most recent solve; when none are
/// recoverable the list is empty and a diagnostic counter is bumped.
pub fn gate_candidates(w: &mut SlidingWindow) -> Vec<CgInitCandidate> {
    if !w.recover_sigma_lambda() {
        w.diagnostics.covariance_failures += 1;
        return Vec::new();
    }
    let ratio = w.cfg.cg_gate_ratio;
    let mut out = Vec::new();
    for (&id, lm) in &w.landmarks {
        if !lm.is_ground || lm.inv_depth <= 0.0 {
            continue;
        }
        let Some(sigma) = lm.sigma_lambda else { continue };
        if sigma / lm.inv_depth >= ratio {
            continue;
        }
        let Some(anchor_slot) = w.frames.iter().position(|f| f.id == lm.anchor_id) else {
            continue;
        };
        let mut obs = vec![(anchor_slot, lm.u_anchor)];
        for (slot, f) in w.frames.iter().enumerate() {
            if slot == anchor_slot {
                continue;
            }
            if let Some(o) = f.obs.get(&id) {
                obs.push((slot, o.uv));
            }
        }
        if obs.len() < 2 {
            continue;
        }
        out.push(CgInitCandidate { id, obs, inv_depth: lm.inv_depth, sigma_lambda: sigma });
    }
    out
}

/// Fit (h, theta, alpha) to the stacked plane-distance residuals of the
/// gated candidates by Gauss-Newton, holding every landmark inverse depth
/// fixed. `frames` carries the body state and pitch-compensation angle per
/// window slot in the same indexing the candidates use.
pub fn initialize_cg(
    candidates: &[CgInitCandidate],
    frames: &[(NavState, f64)],
    ext: &Extrinsics,
    cg0: &CgParams,
    cfg: &EstimatorConfig,
) -> Result<CgInitReport, CgInitError> {
    let n_res: usize = candidates.iter().map(|c| c.obs.len()).sum();
    if n_res < cfg.cg_min_obs {
        return Err(CgInitError::TooFewObservations { have: n_res, need: cfg.cg_min_obs });
    }
    let mut slots: Vec<usize> =
        candidates.iter().flat_map(|c| c.obs.iter().map(|&(s, _)| s)).collect();
    slots.sort_unstable();
    slots.dedup();
    if slots.len() < MIN_SPAN_FRAMES {
        return Err(CgInitError::TooFewFrames { have: slots.len(), need: MIN_SPAN_FRAMES });
    }

    let mut cg = *cg0;
    let mut iterations = 0;
    // Populated by the final evaluation below; the loop always runs.
    let mut last = Evaluation::default();
    for it in 0..=MAX_ITERATIONS {
        let ev = evaluate(candidates, frames, ext, &cg, cfg)?;
        let eig = SymmetricEigen::new(ev.h);
        let max_eig = eig.eigenvalues.max();
        if max_eig <= 0.0 || eig.eigenvalues.min() <= DEGENERACY_EIG_RATIO * max_eig {
            return Err(CgInitError::Degenerate(
                "ground points collinear in the bird's-eye view",
            ));
        }
        last = ev;
        if it == MAX_ITERATIONS {
            break;
        }
        let Some(chol) = last.h.cholesky() else {
            return Err(CgInitError::Degenerate("normal equations not positive definite"));
        };
        let delta = -chol.solve(&last.g);
        cg.h = (cg.h + delta.x).max(0.1);
        cg.theta += delta.y;
        cg.alpha += delta.z;
        iterations = it + 1;
        let scale = 1.0 + cg.h.abs() + cg.theta.abs() + cg.alpha.abs();
        if delta.norm() < 1e-14 * scale {
            last = evaluate(candidates, frames, ext, &cg, cfg)?;
            break;
        }
    }

    let rms = (last.cost / last.rows as f64).sqrt();
    let sigma = rms.max(cfg.sigma_cg_m);
    let covariance = last
        .h
        .try_inverse()
        .map(|inv| inv * sigma * sigma)
        .unwrap_or_else(Matrix3::zeros);
    Ok(CgInitReport {
        cg,
        rms_m: rms,
        accepted: rms < RMS_ACCEPT_M,
        iterations,
        gradient_norm: last.g.norm(),
        covariance,
        n_residuals: last.rows,
        n_frames: slots.len(),
    })
}

#[derive(Default)]
struct Evaluation {
    h: Matrix3<f64>,
    g: Vector3<f64>,
    cost: f64,
    rows: usize,
}

fn evaluate(
    candidates: &[CgInitCandidate],
    frames: &[(NavState, f64)],
    ext: &Extrinsics,
    cg: &CgParams,
    cfg: &EstimatorConfig,
) -> Result<Evaluation, CgInitError> {
    let mut ev = Evaluation::default();
    let mut add = |r: f64, j: RowVector3<f64>| {
        ev.h += j.transpose() * j;
        ev.g += j.transpose() * r;
        ev.cost += r * r;
        ev.rows += 1;
    };
    for c in candidates {
        let (anchor_slot, u_anchor) = c.obs[0];
        let (x_i, comp_i) = &frames[anchor_slot];
        if let Ok((r, jac)) = cg_same_frame_with_jacobians(&u_anchor, c.inv_depth, cg, *comp_i)
        {
            add(r, jac.d_cg);
        }
        for &(slot, _) in &c.obs[1..] {
            let (x_j, comp_j) = &frames[slot];
            if let Ok((r, jac)) = cg_cross_frame_with_jacobians(
                &u_anchor,
                c.inv_depth,
                x_i,
                x_j,
                cg,
                *comp_j,
                ext,
            ) {
                add(r, jac.d_cg);
            }
        }
    }
    drop(add);
    if ev.rows < cfg.cg_min_obs {
        return Err(CgInitError::TooFewObservations { have: ev.rows, need: cfg.cg_min_obs });
    }
    Ok(ev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::testutil::{quiet_cfg, Scene};
    use crate::geometry::{cg_rotation, inverse_depth_from_cg};
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Build exactly consistent candidates and body states for a given
    /// camera-ground truth: identity extrinsics (body = camera), camera
    /// orientations chosen so the world plane z = 0 sits at distance h
    /// with leveling angles (theta, alpha) in every frame.
    fn synthetic(
        cg_true: &CgParams,
        seed: u64,
        n_frames: usize,
        n_points: usize,
    ) -> (Vec<CgInitCandidate>, Vec<(NavState, f64)>, Extrinsics) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ext = Extrinsics {
            r_bc: UnitQuaternion::identity(),
            p_bc: Vector3::zeros(),
        };
        // R_wc must map the modeled plane normal R_cg e_y to -e_z (world
        // up out of the ground), camera center at height h.
        let m = cg_rotation(cg_true) * Vector3::y();
        let r0 = UnitQuaternion::rotation_between(&m, &-Vector3::z()).unwrap();
        let mut frames = Vec::new();
        for k in 0..n_frames {
            let yaw = UnitQuaternion::from_axis_angle(
                &Vector3::z_axis(),
                0.06 * k as f64 + rng.gen_range(-0.02..0.02),
            );
            let q = yaw * r0;
            let p = Vector3::new(
                0.8 * k as f64 + rng.gen_range(-0.05..0.05),
                rng.gen_range(-0.3..0.3),
                cg_true.h,
            );
            frames.push((
                NavState { p, q, v: Vector3::zeros(), b_a: Vector3::zeros(), b_g: Vector3::zeros() },
                0.0,
            ));
        }
        let mut candidates = Vec::new();
        let mut id = 0;
        while candidates.len() < n_points {
            let anchor = candidates.len() % (n_frames - 2);
            let u = NormalizedImagePoint::new(
                rng.gen_range(-0.35..0.35),
                rng.gen_range(0.08..0.4),
            );
            let lambda = inverse_depth_from_cg(&u, cg_true);
            if lambda <= 1.0 / 30.0 {
                continue;
            }
            // Observed in the anchor and the two following frames; the
            // cross-frame residuals are consistent by construction because
            // every camera sees the same world plane.
            let obs = vec![(anchor, u), (anchor + 1, u), (anchor + 2, u)];
            candidates.push(CgInitCandidate {
                id,
                obs,
                inv_depth: lambda,
                sigma_lambda: 1e-4,
            });
            id += 1;
        }
        (candidates, frames, ext)
    }

    fn assert_recovers(cg_true: &CgParams, seed: u64) {
        let (cands, frames, ext) = synthetic(cg_true, seed, 6, 14);
        let cg0 = CgParams { h: 1.5, theta: 0.0, alpha: 0.0 };
        let rep =
            initialize_cg(&cands, &frames, &ext, &cg0, &EstimatorConfig::default()).unwrap();
        assert!(rep.accepted, "rms {}", rep.rms_m);
        assert!(
            (rep.cg.h - cg_true.h).abs() <= 1e-9,
            "seed {seed}: h {} vs {}",
            rep.cg.h,
            cg_true.h
        );
        assert!((rep.cg.theta - cg_true.theta).abs() <= 1e-9, "seed {seed}: theta");
        assert!((rep.cg.alpha - cg_true.alpha).abs() <= 1e-9, "seed {seed}: alpha");
        let scale = 1.0 + rep.cg.h.abs() + rep.cg.theta.abs() + rep.cg.alpha.abs();
        assert!(rep.gradient_norm < 1e-8 * scale, "gradient {}", rep.gradient_norm);
        assert!(rep.rms_m <= 1e-9);
    }

    #[test]
    fn noiseless_recovery_is_exact_across_random_geometries() {
        // Fixed reference cases plus randomized truths.
        assert_recovers(&CgParams { h: 2.0, theta: 0.0, alpha: 0.0 }, 1);
        assert_recovers(
            &CgParams {
                h: 1.7803,
                theta: (-1.151f64).to_radians(),
                alpha: (-0.153f64).to_radians(),
            },
            2,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 10..30 {
            let cg = CgParams {
                h: rng.gen_range(1.2..2.2),
                theta: rng.gen_range(-3.0f64..3.0).to_radians(),
                alpha: rng.gen_range(-3.0f64..3.0).to_radians(),
            };
            assert_recovers(&cg, seed);
        }
    }

    #[test]
    fn deterministic_bitwise_repeatable() {
        let cg_true = CgParams { h: 1.62, theta: 0.01, alpha: -0.004 };
        let (cands, frames, ext) = synthetic(&cg_true, 5, 6, 14);
        let cg0 = CgParams { h: 1.5, theta: 0.0, alpha: 0.0 };
        let cfg = EstimatorConfig::default();
        let a = initialize_cg(&cands, &frames, &ext, &cg0, &cfg).unwrap();
        let b = initialize_cg(&cands, &frames, &ext, &cg0, &cfg).unwrap();
        assert_eq!(a.cg.h.to_bits(), b.cg.h.to_bits());
        assert_eq!(a.cg.theta.to_bits(), b.cg.theta.to_bits());
        assert_eq!(a.cg.alpha.to_bits(), b.cg.alpha.to_bits());
        assert_eq!(a.rms_m.to_bits(), b.rms_m.to_bits());
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn collinear_bev_points_are_rejected_as_degenerate() {
        // All ground points on the camera's forward center line: the roll
        // component about that line is unconstrained.
        let cg_true = CgParams { h: 1.6, theta: 0.0, alpha: 0.0 };
        let ext = Extrinsics { r_bc: UnitQuaternion::identity(), p_bc: Vector3::zeros() };
        let m = cg_rotation(&cg_true) * Vector3::y();
        let r0 = UnitQuaternion::rotation_between(&m, &-Vector3::z()).unwrap();
        let mut frames = Vec::new();
        for k in 0..4 {
            frames.push((
                NavState {
                    // Motion along the optical axis keeps the points on a
                    // single bird's-eye-view line across all frames.
                    p: Vector3::new(0.0, 0.7 * k as f64, cg_true.h),
                    q: r0,
                    v: Vector3::zeros(),
                    b_a: Vector3::zeros(),
                    b_g: Vector3::zeros(),
                },
                0.0,
            ));
        }
        let mut cands = Vec::new();
        for i in 0..15 {
            let u = NormalizedImagePoint::new(0.0, 0.08 + 0.02 * i as f64);
            let lambda = inverse_depth_from_cg(&u, &cg_true);
            cands.push(CgInitCandidate {
                id: i,
                obs: vec![(0, u), (1, u), (2, u)],
                inv_depth: lambda,
                sigma_lambda: 1e-4,
            });
        }
        let cg0 = CgParams { h: 1.5, theta: 0.0, alpha: 0.0 };
        let err = initialize_cg(&cands, &frames, &ext, &cg0, &EstimatorConfig::default())
            .unwrap_err();
        assert!(matches!(err, CgInitError::Degenerate(_)), "{err}");
    }

    #[test]
    fn preconditions_on_observation_count_and_span() {
        let cg_true = CgParams { h: 1.6, theta: 0.0, alpha: 0.0 };
        let (cands, frames, ext) = synthetic(&cg_true, 3, 6, 14);
        let cg0 = CgParams { h: 1.5, theta: 0.0, alpha: 0.0 };
        let cfg = EstimatorConfig::default();
        // Too few stacked observations.
        let err = initialize_cg(&cands[..4], &frames, &ext, &cg0, &cfg).unwrap_err();
        assert!(matches!(err, CgInitError::TooFewObservations { .. }), "{err}");
        // Enough observations but spanning fewer than three frames.
        let two_frame: Vec<CgInitCandidate> = (0..20)
            .map(|i| {
                let mut c = cands[i % cands.len()].clone();
                c.obs = vec![(0, c.obs[0].1), (1, c.obs[0].1)];
                c
            })
            .collect();
        let err = initialize_cg(&two_frame, &frames, &ext, &cg0, &cfg).unwrap_err();
        assert!(matches!(err, CgInitError::TooFewFrames { have: 2, need: 3 }), "{err}");
    }

    #[test]
    fn noisy_depths_are_reported_but_not_accepted() {
        let cg_true = CgParams { h: 1.6, theta: 0.0, alpha: 0.0 };
        let (mut cands, frames, ext) = synthetic(&cg_true, 8, 6, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for c in &mut cands {
            // ~20% depth corruption: plane-distance residuals well above
            // the acceptance RMS.
            c.inv_depth *= 1.0 + rng.gen_range(-0.2..0.2);
        }
        let cg0 = CgParams { h: 1.5, theta: 0.0, alpha: 0.0 };
        let rep =
            initialize_cg(&cands, &frames, &ext, &cg0, &EstimatorConfig::default()).unwrap();
        assert!(!rep.accepted, "rms {}", rep.rms_m);
        assert!(rep.rms_m >= RMS_ACCEPT_M);
    }

    #[test]
    fn window_gating_filters_by_relative_depth_uncertainty() {
        let sc = Scene::new();
        let mut w = sc.build_window(8, quiet_cfg());
        // Calibration inactive: gating runs before activation.
        assert!(!w.cg_active);
        w.optimize();
        let cands = gate_candidates(&mut w);
        assert!(!cands.is_empty(), "well-tracked ground landmarks should pass");
        for c in &cands {
            let lm = &w.landmarks[&c.id];
            assert!(lm.is_ground);
            assert!(c.sigma_lambda / c.inv_depth < w.cfg.cg_gate_ratio);
            assert!(c.obs.len() >= 2);
        }
        // Every candidate must be usable by the fit entry point.
        let frames: Vec<(NavState, f64)> =
            w.frames.iter().map(|f| (f.state, f.theta_comp)).collect();
        let cg0 = CgParams { h: 1.5, theta: 0.0, alpha: 0.0 };
        let rep = initialize_cg(&cands, &frames, &w.ext.clone(), &cg0, &w.cfg).unwrap();
        assert!(rep.accepted, "noiseless window fit rms {}", rep.rms_m);
        assert!((rep.cg.h - sc.cg.h).abs() < 1e-6, "h {} vs {}", rep.cg.h, sc.cg.h);
        assert!(rep.cg.theta.abs() < 1e-6);
        assert!(rep.cg.alpha.abs() < 1e-6);
    }

    #[test]
    fn gating_handles_no_ground_and_missing_covariances() {
        let sc = Scene::new();
        let mut w = sc.build_window(6, quiet_cfg());
        w.optimize();
        // No ground landmarks at all -> empty candidate list.
        let ids: Vec<u64> = w.landmarks.keys().copied().collect();
        for id in &ids {
            w.landmarks.get_mut(id).unwrap().is_ground = false;
        }
        assert!(gate_candidates(&mut w).is_empty());

        // Covariance recovery unavailable -> empty list plus diagnostic.
        let mut w2 = sc.build_window(6, quiet_cfg());
        let before = w2.diagnostics.covariance_failures;
        assert!(gate_candidates(&mut w2).is_empty());
        assert_eq!(w2.diagnostics.covariance_failures, before + 1);
    }

    #[test]
    fn fresh_two_view_landmark_has_larger_uncertainty_than_long_track() {
        use crate::estimator::Observation;

        let sc = Scene::new();
        let mut w = sc.build_window(8, quiet_cfg());
        // Inject a ground landmark seen only in the last two frames, with
        // an exactly consistent inverse depth, to model a freshly
        // triangulated two-view track.
        let fresh_id: u64 = 10_000;
        let p_w = Vector3::new(12.0, 2.0, 0.0);
        let mut u_anchor = None;
        let slots = [w.frames.len() - 2, w.frames.len() - 1];
        for slot in slots {
            let t = w.frames[slot].t;
            let s = sc.state(t);
            let r_wc = s.q.to_rotation_matrix().into_inner()
                * sc.ext.r_bc.to_rotation_matrix().into_inner();
            let o = s.q * sc.ext.p_bc + s.p;
            let pc = r_wc.transpose() * (p_w - o);
            assert!(pc.z > 1.0, "fresh point must be in front of the camera");
            let u = NormalizedImagePoint::new(pc.x / pc.z, pc.y / pc.z);
            if u_anchor.is_none() {
                u_anchor = Some((u, 1.0 / pc.z));
            }
            w.frames[slot]
                .obs
                .insert(fresh_id, Observation { uv: u, is_ground_candidate: true });
        }
        let (u, lambda) = u_anchor.unwrap();
        let anchor_id = w.frames[slots[0]].id;
        w.landmarks.insert(
            fresh_id,
            crate::estimator::WindowLandmark {
                anchor_id,
                u_anchor: u,
                inv_depth: lambda,
                is_ground: true,
                sigma_lambda: None,
            },
        );
        w.optimize();
        assert!(w.recover_sigma_lambda());
        let fresh = &w.landmarks[&fresh_id];
        let fresh_rel = fresh.sigma_lambda.unwrap() / fresh.inv_depth;
        // Best-supported long track: anchored at the first frame.
        let first_id = w.frames[0].id;
        let long_best = w
            .landmarks
            .values()
            .filter(|lm| lm.anchor_id == first_id)
            .filter_map(|lm| lm.sigma_lambda.map(|s| s / lm.inv_depth))
            .fold(f64::INFINITY, f64::min);
        assert!(
            long_best < fresh_rel,
            "long track rel-sigma {long_best} should beat fresh {fresh_rel}"
        );
    }
}
