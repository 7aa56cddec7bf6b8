//! Damped Gauss-Newton (Levenberg-Marquardt) solver over the sliding
//! window with Schur elimination of the scalar landmark blocks, robust
//! kernel weighting and a wall-clock iteration budget.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

use crate::factors::{
    apply_robust_kernel, cg_cross_frame_with_jacobians, cg_same_frame_with_jacobians,
    reprojection_residual, reprojection_with_jacobians, slope_gate, KernelKind, RobustKernel,
};
use crate::imu_preint::{imu_residual, imu_residual_jacobians, GRAVITY};

use super::{SlidingWindow, STATE_DIM};

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("normal equations stayed indefinite after {0} damping boosts")]
    DampingExhausted(usize),
}

/// Immutable snapshot of one solve.
#[derive(Debug, Clone, Default)]
pub struct SolveReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub damping_boosts: usize,
    /// True when 10 consecutive damping boosts failed to produce a descent
    /// step; the
    /// window keeps the last accepted estimate.
    pub aborted: bool,
    pub wall_ms: f64,
    /// Whitened residual RMS per factor family at the final estimate.
    pub rms_imu: f64,
    pub rms_reproj: f64,
    pub rms_cg_same: f64,
    pub rms_cg_cross: f64,
    pub rms_prior: f64,
    pub disabled_factors: usize,
    pub gated_cg: usize,
    pub n_factors: usize,
}

/// Pieces of the final (undamped) normal equations kept for marginal
/// covariance queries on landmark inverse depths.
#[derive(Debug, Clone)]
pub struct CovarianceCache {
    pub lm_ids: Vec<u64>,
    pub hll: Vec<f64>,
    pub hpl: Vec<DVector<f64>>,
    pub chol: Cholesky<f64, Dyn>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum FactorKind {
    Imu,
    Reproj,
    CgSame,
    CgCross,
    Prior,
}

/// One factor instance, resolved to window slots and landmark indices.
#[derive(Debug, Clone, Copy)]
pub(crate) enum FactorSpec {
    Imu { slot: usize },
    Reproj { lm: usize, anchor: usize, target: usize },
    // `gated` freezes the slope-gate decision at spec-build time, so the
    // active factor set stays fixed while candidate steps are compared;
    // re-gating per candidate makes the cost discontinuous and can
    // deadlock the step search.
    CgSame { lm: usize, anchor: usize, gated: bool },
    CgCross { lm: usize, anchor: usize, target: usize, gated: bool },
    Prior,
}

/// Whitened, robust-weighted residual block with its Jacobian fragments.
/// Column offsets follow the solve layout: 15 per frame slot, then cg.
#[derive(Debug, Clone)]
pub(crate) struct EvalBlock {
    pub kind: FactorKind,
    pub r: DVector<f64>,
    pub jacs: Vec<(usize, DMatrix<f64>)>,
    pub lm: Option<(usize, DVector<f64>)>,
    pub cost: f64,
    /// Whitened squared norm before robust weighting (for RMS stats).
    pub sq_norm: f64,
    pub rows: usize,
    pub disabled: bool,
    pub gated: bool,
}

impl EvalBlock {
    fn empty(kind: FactorKind, disabled: bool, gated: bool) -> Self {
        Self {
            kind,
            r: DVector::zeros(0),
            jacs: Vec::new(),
            lm: None,
            cost: 0.0,
            sq_norm: 0.0,
            rows: 0,
            disabled,
            gated,
        }
    }
}

/// Enumerate the factors of the window. `lm_filter` restricts landmark
/// factors to a subset (used by marginalization); `None` keeps all.
pub(crate) fn build_specs(w: &SlidingWindow, lm_ids: &[u64], lm_filter: Option<&[bool]>) -> Vec<FactorSpec> {
    let mut specs = Vec::new();
    if w.prior.is_some() {
        specs.push(FactorSpec::Prior);
    }
    for slot in 0..w.frames.len().saturating_sub(1) {
        if w.frames[slot + 1].preint.is_some() {
            specs.push(FactorSpec::Imu { slot });
        }
    }
    for (k, id) in lm_ids.iter().enumerate() {
        if let Some(f) = lm_filter {
            if !f[k] {
                continue;
            }
        }
        let lm = &w.landmarks[id];
        let Some(anchor) = w.slot_of(lm.anchor_id) else { continue };
        for (slot, frame) in w.frames.iter().enumerate() {
            if !frame.obs.contains_key(id) {
                continue;
            }
            if slot != anchor {
                // Only factors evaluable at the current estimate enter this
                // solve's active set; one that errors at a candidate simply
                // drops out for that candidate. A factor invalid here but
                // valid at a candidate would otherwise veto every step by
                // re-entering with a large residual.
                if reprojection_residual(
                    &lm.u_anchor,
                    &frame.obs[id].uv,
                    &w.frames[anchor].state,
                    &frame.state,
                    lm.inv_depth,
                    &w.ext,
                )
                .is_ok()
                {
                    specs.push(FactorSpec::Reproj { lm: k, anchor, target: slot });
                }
            }
            if lm.is_ground && w.cg_active {
                if slot == anchor {
                    let comp = w.frames[anchor].theta_comp;
                    if let Ok((r, _)) =
                        cg_same_frame_with_jacobians(&lm.u_anchor, lm.inv_depth, &w.cg, comp)
                    {
                        let gated = !slope_gate(r, w.cfg.cutoff_m);
                        specs.push(FactorSpec::CgSame { lm: k, anchor, gated });
                    }
                } else {
                    let comp_j = w.frames[slot].theta_comp;
                    if let Ok((r, _)) = cg_cross_frame_with_jacobians(
                        &lm.u_anchor,
                        lm.inv_depth,
                        &w.frames[anchor].state,
                        &w.frames[slot].state,
                        &w.cg,
                        comp_j,
                        &w.ext,
                    ) {
                        let gated = !slope_gate(r, w.cfg.cutoff_m);
                        specs.push(FactorSpec::CgCross { lm: k, anchor, target: slot, gated });
                    }
                }
            }
        }
    }
    specs
}

/// Lower-triangular whitening of a residual/Jacobian pair by the factor
/// covariance, with jitter escalation for near-singular covariances.
fn whiten_by_cov(
    cov: &nalgebra::SMatrix<f64, 15, 15>,
    r: &mut DVector<f64>,
    jacs: &mut [DMatrix<f64>],
) -> bool {
    let mut c = *cov;
    let mut jitter = 0.0;
    for _ in 0..6 {
        if let Some(chol) = (c + nalgebra::SMatrix::<f64, 15, 15>::identity() * jitter).cholesky() {
            let l = chol.l();
            if let Some(rw) = l.solve_lower_triangular(&*r) {
                let mut ok = true;
                let mut whitened = Vec::with_capacity(jacs.len());
                for j in jacs.iter() {
                    match l.solve_lower_triangular(j) {
                        Some(jw) => whitened.push(jw),
                        None => {
                            ok = false;
                            break;
                        }
                    }
                }
                if ok {
                    *r = rw;
                    for (j, jw) in jacs.iter_mut().zip(whitened) {
                        *j = jw;
                    }
                    return true;
                }
            }
        }
        jitter = if jitter == 0.0 { 1e-16 } else { jitter * 100.0 };
        c = *cov;
    }
    false
}

pub(crate) fn evaluate_factor(w: &SlidingWindow, lm_ids: &[u64], spec: &FactorSpec) -> EvalBlock {
    let cg_off = w.cg_offset();
    match *spec {
        FactorSpec::Imu { slot } => {
            let xi = &w.frames[slot].state;
            let xj = &w.frames[slot + 1].state;
            let pre = w.frames[slot + 1].preint.as_ref().unwrap();
            let mut r = DVector::from_column_slice(imu_residual(pre, xi, xj, &GRAVITY).as_slice());
            let (jk, jk1) = imu_residual_jacobians(pre, xi, xj, &GRAVITY);
            let mut jacs = vec![
                DMatrix::from_column_slice(15, 15, jk.as_slice()),
                DMatrix::from_column_slice(15, 15, jk1.as_slice()),
            ];
            if !whiten_by_cov(&pre.cov, &mut r, &mut jacs) {
                return EvalBlock::empty(FactorKind::Imu, true, false);
            }
            let sq = r.norm_squared();
            EvalBlock {
                kind: FactorKind::Imu,
                r,
                jacs: vec![
                    (slot * STATE_DIM, jacs[0].clone()),
                    ((slot + 1) * STATE_DIM, jacs[1].clone()),
                ],
                lm: None,
                cost: sq,
                sq_norm: sq,
                rows: 15,
                disabled: false,
                gated: false,
            }
        }
        FactorSpec::Reproj { lm, anchor, target } => {
            let id = lm_ids[lm];
            let l = &w.landmarks[&id];
            let u_j = w.frames[target].obs[&id].uv;
            let (r, jac) = match reprojection_with_jacobians(
                &l.u_anchor,
                &u_j,
                &w.frames[anchor].state,
                &w.frames[target].state,
                l.inv_depth,
                &w.ext,
            ) {
                Ok(v) => v,
                Err(_) => return EvalBlock::empty(FactorKind::Reproj, true, false),
            };
            // Whitened units are pixels over sigma_px.
            let wgt = w.focal_px / w.cfg.sigma_px;
            let kernel = RobustKernel {
                kind: KernelKind::Huber,
                scale: w.cfg.huber_px / w.cfg.sigma_px,
            };
            let rw = r * wgt;
            let sq = rw.norm_squared();
            let ke = apply_robust_kernel(sq, &kernel);
            let sw = ke.weight.sqrt() * wgt;
            EvalBlock {
                kind: FactorKind::Reproj,
                r: DVector::from_column_slice((r * ke.weight.sqrt() * wgt).as_slice()),
                jacs: vec![
                    (
                        anchor * STATE_DIM,
                        DMatrix::from_column_slice(2, 6, jac.d_x_i.as_slice()) * sw,
                    ),
                    (
                        target * STATE_DIM,
                        DMatrix::from_column_slice(2, 6, jac.d_x_j.as_slice()) * sw,
                    ),
                ],
                lm: Some((lm, DVector::from_column_slice((jac.d_lambda * sw).as_slice()))),
                cost: ke.rho,
                sq_norm: sq,
                rows: 2,
                disabled: false,
                gated: false,
            }
        }
        FactorSpec::CgSame { lm, anchor, gated } => {
            if gated {
                return EvalBlock::empty(FactorKind::CgSame, false, true);
            }
            let id = lm_ids[lm];
            let l = &w.landmarks[&id];
            let comp = w.frames[anchor].theta_comp;
            let (r, jac) =
                match cg_same_frame_with_jacobians(&l.u_anchor, l.inv_depth, &w.cg, comp) {
                    Ok(v) => v,
                    Err(_) => return EvalBlock::empty(FactorKind::CgSame, true, false),
                };
            let wgt = 1.0 / w.cfg.sigma_cg_m;
            let kernel = RobustKernel {
                kind: KernelKind::Cauchy,
                scale: w.cfg.cauchy_m / w.cfg.sigma_cg_m,
            };
            let sq = (r * wgt) * (r * wgt);
            let ke = apply_robust_kernel(sq, &kernel);
            let sw = ke.weight.sqrt() * wgt;
            let mut jacs = Vec::new();
            if let Some(off) = cg_off {
                jacs.push((off, DMatrix::from_row_slice(1, 3, jac.d_cg.as_slice()) * sw));
            }
            EvalBlock {
                kind: FactorKind::CgSame,
                r: DVector::from_element(1, r * sw),
                jacs,
                lm: Some((lm, DVector::from_element(1, jac.d_lambda * sw))),
                cost: ke.rho,
                sq_norm: sq,
                rows: 1,
                disabled: false,
                gated: false,
            }
        }
        FactorSpec::CgCross { lm, anchor, target, gated } => {
            if gated {
                return EvalBlock::empty(FactorKind::CgCross, false, true);
            }
            let id = lm_ids[lm];
            let l = &w.landmarks[&id];
            let comp_j = w.frames[target].theta_comp;
            let (r, jac) = match cg_cross_frame_with_jacobians(
                &l.u_anchor,
                l.inv_depth,
                &w.frames[anchor].state,
                &w.frames[target].state,
                &w.cg,
                comp_j,
                &w.ext,
            ) {
                Ok(v) => v,
                Err(_) => return EvalBlock::empty(FactorKind::CgCross, true, false),
            };
            let wgt = 1.0 / w.cfg.sigma_cg_m;
            let kernel = RobustKernel {
                kind: KernelKind::Cauchy,
                scale: w.cfg.cauchy_m / w.cfg.sigma_cg_m,
            };
            let sq = (r * wgt) * (r * wgt);
            let ke = apply_robust_kernel(sq, &kernel);
            let sw = ke.weight.sqrt() * wgt;
            let mut jacs = vec![
                (anchor * STATE_DIM, DMatrix::from_row_slice(1, 6, jac.d_x_i.as_slice()) * sw),
                (target * STATE_DIM, DMatrix::from_row_slice(1, 6, jac.d_x_j.as_slice()) * sw),
            ];
            if let Some(off) = cg_off {
                jacs.push((off, DMatrix::from_row_slice(1, 3, jac.d_cg.as_slice()) * sw));
            }
            EvalBlock {
                kind: FactorKind::CgCross,
                r: DVector::from_element(1, r * sw),
                jacs,
                lm: Some((lm, DVector::from_element(1, jac.d_lambda * sw))),
                cost: ke.rho,
                sq_norm: sq,
                rows: 1,
                disabled: false,
                gated: false,
            }
        }
        FactorSpec::Prior => {
            let pr = w.prior.as_ref().unwrap();
            // r(delta) = r0 + J * delta at the current distance from the
            // linearization point; Jacobian held fixed (first-estimate).
            let mut delta = DVector::zeros(pr.jac.ncols());
            let mut col = 0usize;
            let mut jacs = Vec::new();
            for (k, fid) in pr.frame_ids.iter().enumerate() {
                let slot = w
                    .slot_of(*fid)
                    .expect("prior references a frame that left the window");
                let d = w.frames[slot].state.boxminus(&pr.lin_states[k]);
                delta.rows_mut(col, STATE_DIM).copy_from_slice(d.as_slice());
                jacs.push((slot * STATE_DIM, pr.jac.columns(col, STATE_DIM).into_owned()));
                col += STATE_DIM;
            }
            if pr.has_cg {
                let lin = pr.lin_cg.as_ref().unwrap();
                delta[col] = w.cg.h - lin.h;
                delta[col + 1] = w.cg.theta - lin.theta;
                delta[col + 2] = w.cg.alpha - lin.alpha;
                if let Some(off) = cg_off {
                    jacs.push((off, pr.jac.columns(col, 3).into_owned()));
                }
            }
            let r = &pr.r0 + &pr.jac * delta;
            let sq = r.norm_squared();
            EvalBlock {
                kind: FactorKind::Prior,
                rows: r.nrows(),
                r,
                jacs,
                lm: None,
                cost: sq,
                sq_norm: sq,
                disabled: false,
                gated: false,
            }
        }
    }
}

/// Evaluate all factor specs, in parallel when the feature is enabled.
/// Output order matches the spec order, keeping accumulation stable.
pub(crate) fn evaluate_all(
    w: &SlidingWindow,
    lm_ids: &[u64],
    specs: &[FactorSpec],
) -> Vec<EvalBlock> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        specs.par_iter().map(|s| evaluate_factor(w, lm_ids, s)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        specs.iter().map(|s| evaluate_factor(w, lm_ids, s)).collect()
    }
}

/// Normal equations with landmark blocks kept separate for Schur
/// elimination: `hpp` over poses (+cg), per-landmark column/diagonal/rhs.
pub(crate) struct Assembled {
    pub hpp: DMatrix<f64>,
    pub bp: DVector<f64>,
    pub hll: Vec<f64>,
    pub hpl: Vec<DVector<f64>>,
    pub bl: Vec<f64>,
    pub cost: f64,
    pub disabled: usize,
    pub gated: usize,
    /// Spec indices whose evaluation failed at this state; the solver
    /// drops them from the active set once the state is accepted, so they
    /// cannot re-enter at a later candidate and veto its step.
    pub disabled_idx: Vec<usize>,
    pub sq_by_kind: [f64; 5],
    pub rows_by_kind: [usize; 5],
}

fn kind_index(k: FactorKind) -> usize {
    match k {
        FactorKind::Imu => 0,
        FactorKind::Reproj => 1,
        FactorKind::CgSame => 2,
        FactorKind::CgCross => 3,
        FactorKind::Prior => 4,
    }
}

pub(crate) fn assemble(w: &SlidingWindow, lm_ids: &[u64], specs: &[FactorSpec]) -> Assembled {
    let p = w.pose_dim();
    let m = lm_ids.len();
    let blocks = evaluate_all(w, lm_ids, specs);
    let mut a = Assembled {
        hpp: DMatrix::zeros(p, p),
        bp: DVector::zeros(p),
        hll: vec![0.0; m],
        hpl: vec![DVector::zeros(p); m],
        bl: vec![0.0; m],
        cost: 0.0,
        disabled: 0,
        gated: 0,
        disabled_idx: Vec::new(),
        sq_by_kind: [0.0; 5],
        rows_by_kind: [0; 5],
    };
    for (bi, b) in blocks.iter().enumerate() {
        if b.disabled {
            a.disabled += 1;
            a.disabled_idx.push(bi);
            continue;
        }
        if b.gated {
            a.gated += 1;
            continue;
        }
        a.cost += b.cost;
        let ki = kind_index(b.kind);
        a.sq_by_kind[ki] += b.sq_norm;
        a.rows_by_kind[ki] += b.rows;
        for (i, (o1, j1)) in b.jacs.iter().enumerate() {
            let g = j1.transpose() * &b.r;
            for (row, v) in g.iter().enumerate() {
                a.bp[o1 + row] -= v;
            }
            for (j2i, (o2, j2)) in b.jacs.iter().enumerate().skip(i) {
                let h = j1.transpose() * j2;
                for c in 0..h.ncols() {
                    for r in 0..h.nrows() {
                        a.hpp[(o1 + r, o2 + c)] += h[(r, c)];
                        if j2i != i {
                            a.hpp[(o2 + c, o1 + r)] += h[(r, c)];
                        }
                    }
                }
            }
        }
        if let Some((k, jl)) = &b.lm {
            a.hll[*k] += jl.norm_squared();
            a.bl[*k] -= jl.dot(&b.r);
            for (o1, j1) in &b.jacs {
                let v = j1.transpose() * jl;
                for (row, x) in v.iter().enumerate() {
                    a.hpl[*k][o1 + row] += x;
                }
            }
        }
    }
    a
}

/// Drop the specs whose evaluation failed at the just-accepted state, so
/// the active factor set is fixed for all subsequent candidate
/// comparisons within this solve.
fn prune_disabled(specs: &mut Vec<FactorSpec>, a: &mut Assembled) {
    if a.disabled_idx.is_empty() {
        return;
    }
    let dead: std::collections::BTreeSet<usize> = a.disabled_idx.drain(..).collect();
    let mut i = 0;
    specs.retain(|_| {
        let keep = !dead.contains(&i);
        i += 1;
        keep
    });
}

/// One damped Schur-eliminated Gauss-Newton step; None if the reduced
/// system is not positive definite at this damping level.
fn try_step(a: &Assembled, mu: f64) -> Option<(DVector<f64>, Vec<f64>)> {
    let p = a.bp.nrows();
    let mut hred = a.hpp.clone();
    for i in 0..p {
        hred[(i, i)] += mu * a.hpp[(i, i)].max(1e-6);
    }
    let mut bred = a.bp.clone();
    let mut hll_d = vec![0.0; a.hll.len()];
    for k in 0..a.hll.len() {
        if a.hll[k] < 1e-12 {
            continue; // unconstrained landmark: leave untouched
        }
        let d = a.hll[k] * (1.0 + mu) + 1e-12;
        hll_d[k] = d;
        hred.ger(-1.0 / d, &a.hpl[k], &a.hpl[k], 1.0);
        bred.axpy(-a.bl[k] / d, &a.hpl[k], 1.0);
    }
    let chol = Cholesky::new(hred)?;
    let dp = chol.solve(&bred);
    let mut dl = vec![0.0; a.hll.len()];
    for k in 0..a.hll.len() {
        if hll_d[k] > 0.0 {
            dl[k] = (a.bl[k] - a.hpl[k].dot(&dp)) / hll_d[k];
        }
    }
    Some((dp, dl))
}

fn apply_step(w: &SlidingWindow, lm_ids: &[u64], dp: &DVector<f64>, dl: &[f64]) -> SlidingWindow {
    let mut out = w.clone();
    for (slot, f) in out.frames.iter_mut().enumerate() {
        let d = nalgebra::SVector::<f64, 15>::from_column_slice(
            dp.rows(slot * STATE_DIM, STATE_DIM).as_slice(),
        );
        f.state = f.state.boxplus(&d);
    }
    if let Some(off) = w.cg_offset() {
        out.cg.h = (out.cg.h + dp[off]).max(0.1);
        out.cg.theta += dp[off + 1];
        out.cg.alpha += dp[off + 2];
    }
    for (k, id) in lm_ids.iter().enumerate() {
        let lm = out.landmarks.get_mut(id).unwrap();
        lm.inv_depth = (lm.inv_depth + dl[k]).clamp(w.cfg.lambda_min, w.cfg.lambda_max);
    }
    out
}

fn fill_rms(report: &mut SolveReport, a: &Assembled) {
    let rms = |k: usize| {
        if a.rows_by_kind[k] == 0 {
            0.0
        } else {
            (a.sq_by_kind[k] / a.rows_by_kind[k] as f64).sqrt()
        }
    };
    report.rms_imu = rms(0);
    report.rms_reproj = rms(1);
    report.rms_cg_same = rms(2);
    report.rms_cg_cross = rms(3);
    report.rms_prior = rms(4);
    report.disabled_factors = a.disabled;
    report.gated_cg = a.gated;
}

impl SlidingWindow {
    /// Run the windowed nonlinear least-squares solve in place.
    pub fn optimize(&mut self) -> SolveReport {
        let t0 = Instant::now();
        let lm_ids: Vec<u64> = self.landmarks.keys().copied().collect();
        let mut specs = build_specs(self, &lm_ids, None);
        let mut a = assemble(self, &lm_ids, &specs);
        prune_disabled(&mut specs, &mut a);
        let mut report = SolveReport {
            initial_cost: a.cost,
            final_cost: a.cost,
            n_factors: specs.len(),
            ..SolveReport::default()
        };

        let mut mu = 1e-6;
        let cost_floor = 1e-16;
        if a.cost > cost_floor {
            while report.iterations < self.cfg.max_iterations {
                if t0.elapsed().as_secs_f64() * 1e3 > self.cfg.time_budget_ms {
                    break;
                }
                let mut accepted = None;
                let mut consecutive = 0usize;
                while consecutive < 10 {
                    if let Some((dp, dl)) = try_step(&a, mu) {
                        let cand = apply_step(self, &lm_ids, &dp, &dl);
                        let ac = assemble(&cand, &lm_ids, &specs);
                        if ac.cost <= a.cost {
                            accepted = Some((cand, ac, dp));
                            break;
                        }
                        if std::env::var_os("GVIO_DEBUG_LM").is_some() {
                            eprintln!(
                                "reject mu={mu:.1e} cost {:.6e} -> {:.6e} dis {} -> {} gate {} -> {} |dp|={:.2e}",
                                a.cost, ac.cost, a.disabled, ac.disabled, a.gated, ac.gated, dp.amax()
                            );
                        }
                    }
                    consecutive += 1;
                    report.damping_boosts += 1;
                    mu = (mu * 10.0).min(1e8);
                }
                let Some((cand, ac, dp)) = accepted else {
                    report.aborted = true;
                    break;
                };
                let prev = a.cost;
                *self = cand;
                a = ac;
                prune_disabled(&mut specs, &mut a);
                report.iterations += 1;
                mu = (mu / 3.0).max(1e-10);
                let decrease = prev - a.cost;
                if a.cost < cost_floor
                    || decrease <= 1e-10 * prev.max(1e-12)
                    || dp.amax() < 1e-12
                {
                    break;
                }
            }
        }

        report.final_cost = a.cost;
        fill_rms(&mut report, &a);
        report.wall_ms = t0.elapsed().as_secs_f64() * 1e3;

        // Undamped reduced Hessian for marginal covariance queries. With no
        // prior the 4-DoF gauge leaves it singular; a tiny escalating
        // regularization recovers a usable factorization (gauge directions
        // barely touch the landmark-depth marginals we query).
        self.cov_cache = None;
        let p = a.bp.nrows();
        if p > 0 {
            let mut hred = a.hpp.clone();
            for k in 0..a.hll.len() {
                if a.hll[k] > 1e-12 {
                    hred.ger(-1.0 / a.hll[k], &a.hpl[k], &a.hpl[k], 1.0);
                }
            }
            let dmax = (0..p).map(|i| hred[(i, i)]).fold(0.0f64, f64::max).max(1.0);
            let mut jitter = 0.0;
            let mut found = None;
            for _ in 0..5 {
                let mut h = hred.clone();
                for i in 0..p {
                    h[(i, i)] += jitter;
                }
                if let Some(chol) = Cholesky::new(h) {
                    found = Some(chol);
                    break;
                }
                jitter = if jitter == 0.0 { 1e-9 * dmax } else { jitter * 100.0 };
            }
            match found {
                Some(chol) => {
                    self.cov_cache = Some(CovarianceCache {
                        lm_ids,
                        hll: a.hll,
                        hpl: a.hpl,
                        chol,
                    });
                }
                None => self.diagnostics.covariance_failures += 1,
            }
        }
        report
    }

    /// Recover the marginal standard deviation of every landmark's inverse
    /// depth from the last solve; false when no usable cache exists.
    pub fn recover_sigma_lambda(&mut self) -> bool {
        let Some(cache) = &self.cov_cache else { return false };
        let mut out = Vec::with_capacity(cache.lm_ids.len());
        for (k, id) in cache.lm_ids.iter().enumerate() {
            if cache.hll[k] < 1e-12 {
                out.push((*id, None));
                continue;
            }
            let x = cache.chol.solve(&cache.hpl[k]);
            let var = 1.0 / cache.hll[k] + cache.hpl[k].dot(&x) / (cache.hll[k] * cache.hll[k]);
            out.push((*id, (var > 0.0).then(|| var.sqrt())));
        }
        for (id, sigma) in out {
            if let Some(lm) = self.landmarks.get_mut(&id) {
                lm.sigma_lambda = sigma;
            }
        }
        true
    }
}
