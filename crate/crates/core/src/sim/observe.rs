//! Feature observation synthesis: perspective projection of world
//! landmarks, pixel-domain noise for common features, BEV-domain noise for
//! ground features, ROI filtering, per-frame caps, spurious corruption,
//! and IMU-aided feature prediction.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::SimConfig;
use crate::factors::Extrinsics;
use crate::geometry::{
    bev_to_perspective, perspective_to_bev, BevPoint, CameraPoint, CgParams, GeometryError,
    NormalizedImagePoint,
};

use super::trajectory::Trajectory;
use super::world::{LandmarkClass, WorldModel};

#[derive(Debug, Clone, Copy)]
pub struct FeatureObs {
    pub id: u64,
    pub uv: NormalizedImagePoint,
    /// Oracle label: the landmark truly lies on the ground surface.
    pub is_ground: bool,
    /// Oracle label: off-plane ground-corridor point or spurious match.
    pub is_outlier: bool,
}

#[derive(Debug, Clone)]
pub struct FrameObservations {
    pub t: f64,
    pub frame_id: u64,
    pub features: Vec<FeatureObs>,
}

/// The exact local ground plane (n, d) with n . p = d under horizontal arc
/// position x (straight corridors; flat everywhere when no slope is set).
pub(crate) fn local_plane(cfg: &SimConfig, x: f64) -> (Vector3<f64>, f64) {
    if cfg.slope_crest_s_m >= 0.0 && cfg.slope_angle_deg != 0.0 && x > cfg.slope_crest_s_m {
        let g = cfg.slope_angle_deg.to_radians();
        (Vector3::new(-g.sin(), 0.0, g.cos()), -g.sin() * cfg.slope_crest_s_m)
    } else {
        (Vector3::z(), 0.0)
    }
}

/// True camera-ground parameters for a camera pose over the local plane.
pub fn cg_from_camera_pose(
    r_wc: &Matrix3<f64>,
    p_wc: &Vector3<f64>,
    n: &Vector3<f64>,
    d: f64,
) -> CgParams {
    let m = r_wc.transpose() * (-n);
    CgParams { h: n.dot(p_wc) - d, theta: m.z.asin(), alpha: (-m.x).atan2(m.y) }
}

/// Camera pose (world) for a body state and extrinsics.
pub(crate) fn camera_pose(
    q_wb: &UnitQuaternion<f64>,
    p_wb: &Vector3<f64>,
    ext: &Extrinsics,
) -> (Matrix3<f64>, Vector3<f64>) {
    let r_wb = q_wb.to_rotation_matrix().into_inner();
    (r_wb * ext.r_bc.to_rotation_matrix().into_inner(), q_wb * ext.p_bc + p_wb)
}

/// IMU-aided prediction of an existing ground feature in the next frame.
/// `rel` maps previous-camera coordinates to next-camera coordinates.
pub fn predict_feature(
    p_c_prev: &CameraPoint,
    rel_r: &Matrix3<f64>,
    rel_p: &Vector3<f64>,
    cg: &CgParams,
) -> Result<(NormalizedImagePoint, BevPoint), GeometryError> {
    let p_next = rel_r * p_c_prev.0 + rel_p;
    if p_next.z <= 0.0 {
        return Err(GeometryError::BehindCamera { y_bev: p_next.z });
    }
    let uv = NormalizedImagePoint::new(p_next.x / p_next.z, p_next.y / p_next.z);
    let bev = perspective_to_bev(&uv, cg)?;
    Ok((uv, bev))
}

pub struct ObservationOutput {
    pub frames: Vec<FrameObservations>,
    /// Per camera frame: (t, true camera-ground parameters incl. vibration).
    pub cg_truth: Vec<(f64, CgParams)>,
}

pub fn synthesize_observations(
    world: &WorldModel,
    traj: &Trajectory,
    cfg: &SimConfig,
    ext: &Extrinsics,
) -> ObservationOutput {
    let (bx, by) = cfg.image_bounds();
    let sigma_uv = if cfg.noise_enabled { cfg.sigma_px / cfg.focal_px() } else { 0.0 };
    let sigma_bev = if cfg.noise_enabled { cfg.sigma_bev_m } else { 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6F62_7331); // "obs1"
    let mut frames = Vec::with_capacity(traj.cam_indices.len());
    let mut cg_truth = Vec::with_capacity(traj.cam_indices.len());

    for (frame_id, &idx) in traj.cam_indices.iter().enumerate() {
        let st = &traj.states[idx];
        let (r_wc, p_wc) = camera_pose(&st.q, &st.p, ext);
        let (n, d) = local_plane(cfg, p_wc.x);
        let cg = cg_from_camera_pose(&r_wc, &p_wc, &n, d);
        cg_truth.push((st.t, cg));

        let mut ground: Vec<FeatureObs> = Vec::new();
        let mut common: Vec<FeatureObs> = Vec::new();

        for lm in &world.landmarks {
            let p_c = r_wc.transpose() * (lm.p - p_wc);
            if p_c.z < 0.5 {
                continue;
            }
            let uv_exact = NormalizedImagePoint::new(p_c.x / p_c.z, p_c.y / p_c.z);
            if uv_exact.x.abs() > bx || uv_exact.y.abs() > by {
                continue;
            }

            let ground_candidate = matches!(
                lm.class,
                LandmarkClass::Ground | LandmarkClass::GroundOutlier
            );
            if ground_candidate {
                // BEV tracking domain: map through the frame's true geometry,
                // perturb metrically, map back. Candidates outside the ROI
                // (or unmappable) are not tracked at all — the BEV tracker
                // only sees the ROI rectangle.
                if let Ok(bev) = perspective_to_bev(&uv_exact, &cg) {
                    let in_roi = bev.y_bev > 0.0
                        && bev.y_bev <= cfg.roi_forward_m
                        && bev.x_bev.abs() <= cfg.roi_half_width_m;
                    if in_roi {
                        let nx: f64 = StandardNormal.sample(&mut rng);
                        let ny: f64 = StandardNormal.sample(&mut rng);
                        let noisy = BevPoint {
                            x_bev: bev.x_bev + sigma_bev * nx,
                            y_bev: bev.y_bev + sigma_bev * ny,
                        };
                        if let Ok(uv) = bev_to_perspective(&noisy, &cg) {
                            ground.push(FeatureObs {
                                id: lm.id,
                                uv,
                                is_ground: lm.class == LandmarkClass::Ground,
                                is_outlier: lm.class == LandmarkClass::GroundOutlier,
                            });
                        }
                    }
                }
                continue;
            }

            // Perspective (pixel-noise) tracking for everything else.
            let nx: f64 = StandardNormal.sample(&mut rng);
            let ny: f64 = StandardNormal.sample(&mut rng);
            common.push(FeatureObs {
                id: lm.id,
                uv: NormalizedImagePoint::new(
                    uv_exact.x + sigma_uv * nx,
                    uv_exact.y + sigma_uv * ny,
                ),
                is_ground: lm.class == LandmarkClass::Ground,
                is_outlier: false,
            });
        }

        // Deterministic caps: keep lowest ids (persistent tracks).
        ground.sort_by_key(|f| f.id);
        ground.truncate(cfg.max_ground_features);
        common.sort_by_key(|f| f.id);
        common.truncate(cfg.max_common_features);

        let mut features = ground;
        features.append(&mut common);
        features.sort_by_key(|f| f.id);

        // Spurious matches: rare gross corruption with oracle label.
        if cfg.noise_enabled && cfg.spurious_rate > 0.0 {
            for f in features.iter_mut() {
                if rng.gen_bool(cfg.spurious_rate.clamp(0.0, 1.0)) {
                    f.uv = NormalizedImagePoint::new(
                        rng.gen_range(-bx..bx),
                        rng.gen_range(-by..by),
                    );
                    f.is_outlier = true;
                }
            }
        }

        frames.push(FrameObservations { t: st.t, frame_id: frame_id as u64, features });
    }

    ObservationOutput { frames, cg_truth }
}
