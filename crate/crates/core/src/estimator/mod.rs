//! Sliding-window factor-graph back end: state bookkeeping, landmark
//! triangulation, damped Gauss-Newton solving with robust kernels, and
//! Schur-complement marginalization.

mod init;
mod marginalize;
mod solve;
#[cfg(test)]
pub(crate) mod testutil;

pub use init::{initialize_vio, BufferedFrame, InitError, InitOutput, VioInitBuffer};
pub use marginalize::schur_marginalize;
pub use solve::{CovarianceCache, SolveError, SolveReport};

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, UnitQuaternion};

use crate::config::{EstimatorConfig, RunMode};
use crate::factors::Extrinsics;
use crate::geometry::{
    inverse_depth_from_cg, pitch_compensation, CgParams, NormalizedImagePoint, PitchCompConfig,
    PitchHistory,
};
use crate::imu_preint::{NavState, Preintegration};

/// One feature measurement attached to a frame.
#[derive(Debug, Clone, Copy)]
pub struct Observation {
    pub uv: NormalizedImagePoint,
    /// Tagged as a BEV-tracked ground candidate by the front end.
    pub is_ground_candidate: bool,
}

/// A frame in the window. `id` is a persistent monotonic counter so the
/// marginalization prior can reference frames across slides.
#[derive(Debug, Clone)]
pub struct Frame {
    pub id: u64,
    pub t: f64,
    pub state: NavState,
    /// Preintegrated IMU from the previous window frame to this one.
    pub preint: Option<Preintegration>,
    pub obs: BTreeMap<u64, Observation>,
    /// Pitch compensation angle applied to camera-ground factors touching
    /// this frame (fixed at frame insertion).
    pub theta_comp: f64,
}

/// Inverse-depth landmark anchored at its first observing window frame.
#[derive(Debug, Clone)]
pub struct WindowLandmark {
    pub anchor_id: u64,
    pub u_anchor: NormalizedImagePoint,
    pub inv_depth: f64,
    pub is_ground: bool,
    /// Marginal standard deviation of inv_depth from the last covariance
    /// recovery; None until recovered.
    pub sigma_lambda: Option<f64>,
}

/// Linearized prior from marginalization: r(delta) = r0 + J * delta over
/// the retained error-states, first-estimate Jacobian held fixed.
#[derive(Debug, Clone)]
pub struct MargPrior {
    pub frame_ids: Vec<u64>,
    pub has_cg: bool,
    pub jac: DMatrix<f64>,
    pub r0: DVector<f64>,
    pub lin_states: Vec<NavState>,
    pub lin_cg: Option<CgParams>,
}

/// Diagnostics counters accumulated across the window's lifetime.
#[derive(Debug, Clone, Default)]
pub struct WindowDiagnostics {
    pub dropped_observations: u64,
    pub disabled_depth_factors: u64,
    pub gated_cg_factors: u64,
    pub marginalization_regularized: u64,
    pub covariance_failures: u64,
}

#[derive(Debug, Clone)]
pub struct SlidingWindow {
    pub frames: Vec<Frame>,
    pub landmarks: BTreeMap<u64, WindowLandmark>,
    pub cg: CgParams,
    pub cg_active: bool,
    pub prior: Option<MargPrior>,
    pub cfg: EstimatorConfig,
    pub ext: Extrinsics,
    /// Focal length in pixels, used to whiten normalized-plane residuals
    /// against the pixel measurement noise.
    pub focal_px: f64,
    pub pitch_history: PitchHistory,
    pub diagnostics: WindowDiagnostics,
    pub(crate) cov_cache: Option<CovarianceCache>,
    next_frame_id: u64,
}

pub const STATE_DIM: usize = 15;

impl SlidingWindow {
    pub fn new(cfg: EstimatorConfig, ext: Extrinsics, focal_px: f64) -> Self {
        let cg_active = cfg.mode == RunMode::PreCalibrated;
        let cg = cfg.cg_prior().unwrap_or(CgParams { h: 1.5, theta: 0.0, alpha: 0.0 });
        Self {
            frames: Vec::new(),
            landmarks: BTreeMap::new(),
            cg,
            cg_active,
            prior: None,
            cfg,
            ext,
            focal_px,
            pitch_history: PitchHistory::new(3.0),
            diagnostics: WindowDiagnostics::default(),
            cov_cache: None,
            next_frame_id: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.cfg.window_size
    }

    /// Error-state layout: frames (15 each), then cg (3, when active),
    /// then landmark inverse depths (1 each, BTreeMap order).
    pub fn pose_dim(&self) -> usize {
        self.frames.len() * STATE_DIM + if self.cg_active { 3 } else { 0 }
    }

    pub fn cg_offset(&self) -> Option<usize> {
        self.cg_active.then(|| self.frames.len() * STATE_DIM)
    }

    pub fn slot_of(&self, frame_id: u64) -> Option<usize> {
        self.frames.iter().position(|f| f.id == frame_id)
    }

    /// Activate camera-ground factors with the given parameter estimate.
    pub fn activate_cg(&mut self, cg: CgParams) {
        self.cg = cg;
        self.cg_active = true;
    }

    /// Extract the current body pitch (nose-up angle) from a state.
    pub fn body_pitch(q: &UnitQuaternion<f64>) -> f64 {
        q.to_rotation_matrix().into_inner()[(2, 0)].clamp(-1.0, 1.0).asin()
    }

    /// Seed the window with an initialized first frame.
    pub fn push_initial_frame(&mut self, t: f64, state: NavState, obs: BTreeMap<u64, Observation>) {
        assert!(self.frames.is_empty());
        let pitch = Self::body_pitch(&state.q);
        self.pitch_history.push(t, pitch);
        let theta_comp = self.frame_theta_comp(t, pitch);
        let id = self.next_frame_id;
        self.next_frame_id += 1;
        self.frames.push(Frame { id, t, state, preint: None, obs, theta_comp });
        self.register_new_tracks();
    }

    fn frame_theta_comp(&self, t: f64, pitch: f64) -> f64 {
        if !self.cfg.pitch_comp {
            return 0.0;
        }
        let (comp, _) =
            pitch_compensation(&self.pitch_history, pitch, t, &PitchCompConfig::default());
        comp
    }

    /// Append a frame predicted by IMU propagation and attach observations.
    pub fn add_frame(
        &mut self,
        t: f64,
        preint: Preintegration,
        obs: BTreeMap<u64, Observation>,
    ) {
        assert!(!self.frames.is_empty(), "window must be initialized first");
        let last = self.frames.last().unwrap();
        let state = propagate(&last.state, &preint);
        let pitch = Self::body_pitch(&state.q);
        self.pitch_history.push(t, pitch);
        let theta_comp = self.frame_theta_comp(t, pitch);

        // Drop observations referencing landmarks whose anchor already left
        // the window (stale ids after a slide are unrecoverable).
        let mut clean = BTreeMap::new();
        for (id, o) in obs {
            if let Some(lm) = self.landmarks.get(&id) {
                if self.slot_of(lm.anchor_id).is_none() {
                    self.diagnostics.dropped_observations += 1;
                    continue;
                }
            }
            clean.insert(id, o);
        }

        let id = self.next_frame_id;
        self.next_frame_id += 1;
        self.frames.push(Frame { id, t, state, preint: Some(preint), obs: clean, theta_comp });
        self.register_new_tracks();
    }

    /// Triangulate tracks that have at least two observations and enough
    /// rotation-compensated parallax; ground candidates are initialized
    /// instantly from the camera-ground geometry when it is active.
    fn register_new_tracks(&mut self) {
        let Some(newest) = self.frames.last() else { return };
        let newest_idx = self.frames.len() - 1;
        let mut inserted: Vec<(u64, WindowLandmark)> = Vec::new();

        for (&fid, o) in &newest.obs {
            if self.landmarks.contains_key(&fid) {
                continue;
            }
            // Find the earliest window frame observing this feature.
            let Some(anchor_idx) = self.frames.iter().position(|f| f.obs.contains_key(&fid))
            else {
                continue;
            };
            let anchor = &self.frames[anchor_idx];
            let u_anchor = anchor.obs[&fid].uv;
            let is_ground = o.is_ground_candidate || anchor.obs[&fid].is_ground_candidate;

            if is_ground && self.cg_active {
                // Instant metric recovery from the ground constraint.
                let shifted = CgParams {
                    theta: self.cg.theta + anchor.theta_comp,
                    ..self.cg
                };
                let lambda = inverse_depth_from_cg(&u_anchor, &shifted);
                if lambda > self.cfg.lambda_min && lambda < self.cfg.lambda_max {
                    inserted.push((
                        fid,
                        WindowLandmark {
                            anchor_id: anchor.id,
                            u_anchor,
                            inv_depth: lambda,
                            is_ground: true,
                            sigma_lambda: None,
                        },
                    ));
                    continue;
                }
            }
            if anchor_idx == newest_idx {
                continue; // single observation so far
            }
            if let Some(lambda) = triangulate_two_view(
                &anchor.state,
                &newest.state,
                &u_anchor,
                &o.uv,
                &self.ext,
                self.cfg.parallax_min_rad,
            ) {
                // Outside the usable depth range: leave the track alone and
                // retry as the geometry improves, rather than seeding a
                // landmark with a clamped (wrong) depth.
                if lambda < self.cfg.lambda_min || lambda > self.cfg.lambda_max {
                    continue;
                }
                inserted.push((
                    fid,
                    WindowLandmark {
                        anchor_id: anchor.id,
                        u_anchor,
                        inv_depth: lambda,
                        is_ground,
                        sigma_lambda: None,
                    },
                ));
            }
        }
        for (fid, lm) in inserted {
            self.landmarks.insert(fid, lm);
        }
    }

    /// Frames' persistent ids in window order.
    pub fn frame_ids(&self) -> Vec<u64> {
        self.frames.iter().map(|f| f.id).collect()
    }
}

/// Propagate a navigation state through a preintegrated IMU interval.
pub fn propagate(state: &NavState, pre: &Preintegration) -> NavState {
    use crate::imu_preint::{correct_for_bias, BiasPair, GRAVITY};
    let dt = pre.dt_total;
    let bias = BiasPair { accel: state.b_a, gyro: state.b_g };
    // When the bias drifted past the first-order validity bound, fall back
    // to the raw deltas; the solver re-estimates against the same model.
    let (alpha, beta, gamma) = match correct_for_bias(pre, &bias) {
        Ok(c) => (c.alpha, c.beta, c.gamma),
        Err(_) => (pre.alpha_hat, pre.beta_hat, pre.gamma_hat),
    };
    NavState {
        p: state.p + state.v * dt + 0.5 * GRAVITY * dt * dt + state.q * alpha,
        q: state.q * gamma,
        v: state.v + GRAVITY * dt + state.q * beta,
        b_a: state.b_a,
        b_g: state.b_g,
    }
}

/// Two-view midpoint triangulation; returns the anchor-frame inverse depth
/// or None when the rotation-compensated parallax is below the threshold
/// or geometry is degenerate.
pub fn triangulate_two_view(
    x_i: &NavState,
    x_j: &NavState,
    u_i: &NormalizedImagePoint,
    u_j: &NormalizedImagePoint,
    ext: &Extrinsics,
    parallax_min: f64,
) -> Option<f64> {
    let r_bc = ext.r_bc.to_rotation_matrix().into_inner();
    let r_wci = x_i.q.to_rotation_matrix().into_inner() * r_bc;
    let r_wcj = x_j.q.to_rotation_matrix().into_inner() * r_bc;
    let o_i = x_i.q * ext.p_bc + x_i.p;
    let o_j = x_j.q * ext.p_bc + x_j.p;

    let d_i = (r_wci * u_i.bearing()).normalize();
    let d_j = (r_wcj * u_j.bearing()).normalize();

    // Rotation-compensated parallax: the angle between the bearings once
    // expressed in a common frame.
    let parallax = d_i.cross(&d_j).norm().atan2(d_i.dot(&d_j));
    if parallax < parallax_min {
        return None;
    }

    // Midpoint method: minimize |o_i + s d_i - (o_j + t d_j)|.
    let b = o_j - o_i;
    let a11 = 1.0;
    let a12 = -d_i.dot(&d_j);
    let a22 = 1.0;
    let det = a11 * a22 - a12 * a12;
    if det.abs() < 1e-12 {
        return None;
    }
    let b1 = d_i.dot(&b);
    let b2 = -d_j.dot(&b);
    let s = (b1 * a22 - a12 * b2) / det;
    let t = (a11 * b2 - a12 * b1) / det;
    if s <= 0.0 || t <= 0.0 {
        return None;
    }
    let p = (o_i + d_i * s + o_j + d_j * t) / 2.0;
    let p_ci = r_wci.transpose() * (p - o_i);
    if p_ci.z <= 0.0 {
        return None;
    }
    Some(1.0 / p_ci.z)
}
