//! Trajectory and calibration metrics: KITTI-style relative errors,
//! absolute trajectory error with 4-DoF (default) or 6-DoF alignment,
//! camera-ground convergence reporting, and bird's-eye-view stitch
//! consistency.

pub mod plots;

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factors::Extrinsics;
use crate::geometry::{cg_rotation, CgParams, NormalizedImagePoint};
use crate::imu_preint::NavState;

/// One pose sample of an estimated or ground-truth trajectory.
#[derive(Debug, Clone, Copy)]
pub struct PoseSample {
    pub t: f64,
    pub p: Vector3<f64>,
    pub q: UnitQuaternion<f64>,
}

/// Full per-frame output of a run: poses plus the camera-ground estimate
/// and its covariance diagonal whenever calibration is active.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryEstimate {
    pub poses: Vec<PoseSample>,
    /// (t, cg, covariance diagonal) for frames where calibration is active.
    pub cg_series: Vec<(f64, CgParams, Vector3<f64>)>,
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("trajectories differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("trajectory covers {covered:.1} m; no subsequence of {requested:.0} m exists (usable lengths: {usable:?})")]
    TooShort { covered: f64, requested: f64, usable: Vec<f64> },
    #[error("need at least {1} poses, have {0}")]
    TooFewPoses(usize, usize),
}

/// Standard evaluation lengths, meters.
pub const KITTI_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];
/// Dense short-range lengths for desk-scale sequences, meters.
pub const SHORT_LENGTHS: [f64; 5] = [10.0, 20.0, 30.0, 40.0, 50.0];

/// Relative pose errors averaged over all subsequences of the given
/// lengths.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RelativeErrors {
    /// Mean end-pose translation error as a percentage of segment length.
    pub t_rel_pct: f64,
    /// Mean rotation error in degrees per 100 m.
    pub r_rel_deg_per_100m: f64,
    /// Per-length breakdown: (length m, t_rel %, r_rel deg/100 m, count).
    pub per_length: Vec<(f64, f64, f64, usize)>,
}

/// KITTI-style relative errors: for every start pose and every requested
/// length, the subsequence end-pose error after aligning at the segment
/// start, averaged over all segments.
pub fn relative_errors(
    est: &[PoseSample],
    gt: &[PoseSample],
    lengths: &[f64],
) -> Result<RelativeErrors, EvalError> {
    if est.len() != gt.len() {
        return Err(EvalError::LengthMismatch(est.len(), gt.len()));
    }
    let n = gt.len();
    if n < 2 {
        return Err(EvalError::TooFewPoses(n, 2));
    }
    // Cumulative ground-truth path length.
    let mut cum = Vec::with_capacity(n);
    let mut acc = 0.0;
    cum.push(0.0);
    for i in 1..n {
        acc += (gt[i].p - gt[i - 1].p).norm();
        cum.push(acc);
    }
    let covered = acc;
    let min_len = lengths.iter().copied().fold(f64::INFINITY, f64::min);
    if covered < min_len {
        let usable: Vec<f64> =
            lengths.iter().copied().filter(|&l| l <= covered).collect();
        return Err(EvalError::TooShort { covered, requested: min_len, usable });
    }

    let mut per_length = Vec::new();
    let mut t_sum = 0.0;
    let mut r_sum = 0.0;
    let mut total = 0usize;
    for &len in lengths {
        let mut t_acc = 0.0;
        let mut r_acc = 0.0;
        let mut count = 0usize;
        let mut j = 0usize;
        for i in 0..n {
            if j < i {
                j = i;
            }
            while j < n && cum[j] - cum[i] < len {
                j += 1;
            }
            if j >= n {
                break;
            }
            let seg = cum[j] - cum[i];
            // Relative end pose in each trajectory's segment-start frame.
            let d_gt_p = gt[i].q.inverse() * (gt[j].p - gt[i].p);
            let d_gt_q = gt[i].q.inverse() * gt[j].q;
            let d_es_p = est[i].q.inverse() * (est[j].p - est[i].p);
            let d_es_q = est[i].q.inverse() * est[j].q;
            t_acc += (d_es_p - d_gt_p).norm() / seg * 100.0;
            r_acc += (d_gt_q.inverse() * d_es_q).angle().to_degrees() / (seg / 100.0);
            count += 1;
        }
        if count > 0 {
            per_length.push((len, t_acc / count as f64, r_acc / count as f64, count));
            t_sum += t_acc;
            r_sum += r_acc;
            total += count;
        }
    }
    if total == 0 {
        let usable: Vec<f64> =
            lengths.iter().copied().filter(|&l| l <= covered).collect();
        return Err(EvalError::TooShort { covered, requested: min_len, usable });
    }
    Ok(RelativeErrors {
        t_rel_pct: t_sum / total as f64,
        r_rel_deg_per_100m: r_sum / total as f64,
        per_length,
    })
}

/// How the trajectories were aligned before the position RMSE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Alignment {
    FourDof,
    SixDof,
    /// Degenerate geometry: aligned at the first pose instead.
    FirstPose,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AteReport {
    pub rmse_m: f64,
    pub alignment: Alignment,
    /// True when the requested alignment was degenerate and the first-pose
    /// fallback was used.
    pub degenerate_fallback: bool,
}

/// Position RMSE after a best-fit alignment: 4-DoF (yaw + translation) by
/// default, full SE(3) when `six_dof` is set. Degenerate geometry falls
/// back to aligning the first poses.
pub fn absolute_trajectory_error(
    est: &[PoseSample],
    gt: &[PoseSample],
    six_dof: bool,
) -> Result<AteReport, EvalError> {
    if est.len() != gt.len() {
        return Err(EvalError::LengthMismatch(est.len(), gt.len()));
    }
    let n = est.len();
    if n < 3 {
        return Err(EvalError::TooFewPoses(n, 3));
    }
    let ec: Vector3<f64> = est.iter().map(|s| s.p).sum::<Vector3<f64>>() / n as f64;
    let gc: Vector3<f64> = gt.iter().map(|s| s.p).sum::<Vector3<f64>>() / n as f64;

    let (rot, degenerate) = if six_dof {
        // Kabsch: R = V diag(1,1,det) U^T of the cross-covariance.
        let mut cov = Matrix3::zeros();
        for (e, g) in est.iter().zip(gt) {
            cov += (g.p - gc) * (e.p - ec).transpose();
        }
        let svd = cov.svd(true, true);
        if svd.singular_values[1] <= 1e-12 * svd.singular_values[0].max(1e-300) {
            (Matrix3::identity(), true)
        } else {
            let u = svd.u.unwrap();
            let vt = svd.v_t.unwrap();
            let d = (u * vt).determinant().signum();
            (u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * vt, false)
        }
    } else {
        // Optimal yaw: maximize sum of horizontal dot products.
        let mut c = 0.0;
        let mut s = 0.0;
        for (e, g) in est.iter().zip(gt) {
            let et = e.p - ec;
            let gtv = g.p - gc;
            c += gtv.x * et.x + gtv.y * et.y;
            s += gtv.y * et.x - gtv.x * et.y;
        }
        if c.abs() < 1e-12 && s.abs() < 1e-12 {
            (Matrix3::identity(), true)
        } else {
            let yaw = s.atan2(c);
            (
                *UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw)
                    .to_rotation_matrix()
                    .matrix(),
                false,
            )
        }
    };

    let (rot, t, alignment) = if degenerate {
        (Matrix3::identity(), gt[0].p - est[0].p, Alignment::FirstPose)
    } else {
        let t = gc - rot * ec;
        (rot, t, if six_dof { Alignment::SixDof } else { Alignment::FourDof })
    };

    let mut ssq = 0.0;
    for (e, g) in est.iter().zip(gt) {
        ssq += (rot * e.p + t - g.p).norm_squared();
    }
    Ok(AteReport {
        rmse_m: (ssq / n as f64).sqrt(),
        alignment,
        degenerate_fallback: degenerate,
    })
}

/// Height thresholds for convergence reporting, meters.
pub const CG_H_THRESHOLDS_M: [f64; 3] = [0.1, 0.02, 0.01];
/// Angle thresholds for convergence reporting, degrees.
pub const CG_ANGLE_THRESHOLDS_DEG: [f64; 3] = [1.0, 0.2, 0.1];
/// The error must stay below a threshold for this long to count.
pub const CG_PERSIST_S: f64 = 5.0;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CgConvergenceReport {
    /// True when at least one camera-ground estimate was produced.
    pub initialized: bool,
    /// First time |h - h_true| stays < threshold for >= CG_PERSIST_S,
    /// per threshold in CG_H_THRESHOLDS_M order.
    pub h_time_to: Vec<Option<f64>>,
    pub theta_time_to: Vec<Option<f64>>,
    pub alpha_time_to: Vec<Option<f64>>,
    /// Final errors (|dh| m, |dtheta| deg, |dalpha| deg), when initialized.
    pub final_errors: Option<(f64, f64, f64)>,
}

fn time_to_threshold(series: &[(f64, f64)], thr: f64) -> Option<f64> {
    // First sample from which the error stays below thr for at least
    // CG_PERSIST_S (and through the end of the series if it ends sooner
    // than that never qualifies).
    let end = series.last()?.0;
    for (i, &(t0, _)) in series.iter().enumerate() {
        if end - t0 < CG_PERSIST_S {
            break;
        }
        if series[i..].iter().take_while(|&&(t, _)| t <= t0 + CG_PERSIST_S).all(|&(_, e)| e < thr)
            && series[i..].iter().any(|&(t, _)| t >= t0 + CG_PERSIST_S)
        {
            return Some(t0);
        }
    }
    None
}

/// Time-to-threshold table for the camera-ground estimate against a fixed
/// truth, plus the final errors.
pub fn cg_convergence_report(
    series: &[(f64, CgParams)],
    cg_truth: &CgParams,
) -> CgConvergenceReport {
    if series.is_empty() {
        return CgConvergenceReport {
            initialized: false,
            h_time_to: vec![None; CG_H_THRESHOLDS_M.len()],
            theta_time_to: vec![None; CG_ANGLE_THRESHOLDS_DEG.len()],
            alpha_time_to: vec![None; CG_ANGLE_THRESHOLDS_DEG.len()],
            final_errors: None,
        };
    }
    let h_err: Vec<(f64, f64)> =
        series.iter().map(|(t, cg)| (*t, (cg.h - cg_truth.h).abs())).collect();
    let th_err: Vec<(f64, f64)> = series
        .iter()
        .map(|(t, cg)| (*t, (cg.theta - cg_truth.theta).abs().to_degrees()))
        .collect();
    let al_err: Vec<(f64, f64)> = series
        .iter()
        .map(|(t, cg)| (*t, (cg.alpha - cg_truth.alpha).abs().to_degrees()))
        .collect();
    let last = series.last().unwrap();
    CgConvergenceReport {
        initialized: true,
        h_time_to: CG_H_THRESHOLDS_M.iter().map(|&t| time_to_threshold(&h_err, t)).collect(),
        theta_time_to: CG_ANGLE_THRESHOLDS_DEG
            .iter()
            .map(|&t| time_to_threshold(&th_err, t))
            .collect(),
        alpha_time_to: CG_ANGLE_THRESHOLDS_DEG
            .iter()
            .map(|&t| time_to_threshold(&al_err, t))
            .collect(),
        final_errors: Some((
            (last.1.h - cg_truth.h).abs(),
            (last.1.theta - cg_truth.theta).abs().to_degrees(),
            (last.1.alpha - cg_truth.alpha).abs().to_degrees(),
        )),
    }
}

/// A ground feature track for stitch evaluation: the frames it was
/// observed in and the normalized image observations.
#[derive(Debug, Clone)]
pub struct StitchTrack {
    pub id: u64,
    pub obs: Vec<(usize, NormalizedImagePoint)>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StitchReport {
    /// (landmark id, standard deviation of its merged world positions, m).
    pub per_landmark: Vec<(u64, f64)>,
    pub mean_spread_m: f64,
    pub p50_spread_m: f64,
    pub p90_spread_m: f64,
    pub max_spread_m: f64,
}

/// Map every ground observation to world ground coordinates via inverse
/// perspective mapping with the provided poses and camera-ground
/// parameters, then report the per-landmark spread of the merged
/// positions. Tracks with fewer than 2 usable observations are skipped.
pub fn stitch_consistency(
    tracks: &[StitchTrack],
    poses: &[(NavState, f64)],
    cg: &CgParams,
    ext: &Extrinsics,
) -> StitchReport {
    let mut per_landmark = Vec::new();
    for tr in tracks {
        let mut pts: Vec<Vector2<f64>> = Vec::new();
        for &(slot, u) in &tr.obs {
            let Some((state, theta_comp)) = poses.get(slot) else { continue };
            let shifted = CgParams { theta: cg.theta + theta_comp, ..*cg };
            let lambda = (cg_rotation(&shifted).transpose() * u.bearing()).y / cg.h;
            if lambda <= 1e-6 {
                continue;
            }
            let p_c = u.bearing() / lambda;
            let r_wc = state.q.to_rotation_matrix().into_inner()
                * ext.r_bc.to_rotation_matrix().into_inner();
            let p_w = r_wc * p_c + state.q * ext.p_bc + state.p;
            pts.push(Vector2::new(p_w.x, p_w.y));
        }
        if pts.len() < 2 {
            continue;
        }
        let mean = pts.iter().sum::<Vector2<f64>>() / pts.len() as f64;
        let var =
            pts.iter().map(|p| (p - mean).norm_squared()).sum::<f64>() / pts.len() as f64;
        per_landmark.push((tr.id, var.sqrt()));
    }
    let mut spreads: Vec<f64> = per_landmark.iter().map(|&(_, s)| s).collect();
    spreads.sort_by(|a, b| a.total_cmp(b));
    let pct = |q: f64| -> f64 {
        if spreads.is_empty() {
            return 0.0;
        }
        let idx = ((spreads.len() - 1) as f64 * q).round() as usize;
        spreads[idx]
    };
    StitchReport {
        mean_spread_m: if spreads.is_empty() {
            0.0
        } else {
            spreads.iter().sum::<f64>() / spreads.len() as f64
        },
        p50_spread_m: pct(0.5),
        p90_spread_m: pct(0.9),
        max_spread_m: spreads.last().copied().unwrap_or(0.0),
        per_landmark,
    }
}
