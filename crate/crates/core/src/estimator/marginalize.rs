//! Schur-complement marginalization of the oldest frame and its anchored
//! landmarks into a linearized prior over the retained error-states.

use nalgebra::{DMatrix, DVector};

use super::solve::{build_specs, evaluate_all, FactorSpec};
use super::{MargPrior, SlidingWindow, STATE_DIM};

const EIG_FLOOR: f64 = 1e-10;

/// Eliminate the leading `marg_dim` block of the Gauss-Newton system
/// (H, b): returns the reduced system over the trailing block plus a flag
/// set when the eliminated block needed eigenvalue-floor regularization
/// (eigenvalues below 1e-10 are treated as zero, pseudo-inverse style).
pub fn schur_marginalize(
    h: &DMatrix<f64>,
    b: &DVector<f64>,
    marg_dim: usize,
) -> (DMatrix<f64>, DVector<f64>, bool) {
    let n = h.nrows();
    assert_eq!(n, h.ncols());
    assert_eq!(n, b.nrows());
    assert!(marg_dim <= n);
    let r = n - marg_dim;

    let hmm = h.view((0, 0), (marg_dim, marg_dim)).into_owned();
    let hrm = h.view((marg_dim, 0), (r, marg_dim)).into_owned();
    let hrr = h.view((marg_dim, marg_dim), (r, r)).into_owned();
    let bm = b.rows(0, marg_dim).into_owned();
    let br = b.rows(marg_dim, r).into_owned();

    // Pseudo-inverse of the (symmetric PSD) eliminated block with an
    // eigenvalue floor guarding near-singular directions.
    let sym = (&hmm + hmm.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut regularized = false;
    let mut inv_vals = eig.eigenvalues.clone();
    for v in inv_vals.iter_mut() {
        if *v < EIG_FLOOR {
            *v = 0.0;
            regularized = true;
        } else {
            *v = 1.0 / *v;
        }
    }
    let hmm_inv =
        &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();

    let hrm_hmm_inv = &hrm * hmm_inv;
    let mut hp = hrr - &hrm_hmm_inv * hrm.transpose();
    hp = (&hp + hp.transpose()) * 0.5;
    let bp = br - hrm_hmm_inv * bm;
    (hp, bp, regularized)
}

/// Factorize a reduced information pair into a square-root prior
/// r(delta) = r0 + J*delta with J^T J = H and J^T r0 = -b; rank-deficient
/// directions (eigenvalues below the floor) are dropped.
fn information_to_sqrt(h: &DMatrix<f64>, b: &DVector<f64>) -> Option<(DMatrix<f64>, DVector<f64>)> {
    let eig = h.clone().symmetric_eigen();
    let mut rows = Vec::new();
    let mut r0 = Vec::new();
    for (i, &val) in eig.eigenvalues.iter().enumerate() {
        if val <= EIG_FLOOR {
            continue;
        }
        let s = val.sqrt();
        let v = eig.eigenvectors.column(i);
        rows.push(v.transpose() * s);
        r0.push(-(v.transpose() * b)[0] / s);
    }
    if rows.is_empty() {
        return None;
    }
    let jac = DMatrix::from_rows(&rows.iter().map(|r| r.row(0).into_owned()).collect::<Vec<_>>());
    Some((jac, DVector::from_vec(r0)))
}

impl SlidingWindow {
    /// Marginalize the oldest frame and every landmark anchored there,
    /// replacing the prior and sliding the window.
    pub fn marginalize(&mut self) {
        assert!(self.frames.len() >= 2, "need at least two frames to marginalize");
        let old_id = self.frames[0].id;
        let anchored: Vec<u64> = self
            .landmarks
            .iter()
            .filter(|(_, lm)| lm.anchor_id == old_id)
            .map(|(id, _)| *id)
            .collect();

        // Factors touching the departing variables: the prior, the first
        // IMU link, and every factor of an anchored landmark.
        let mut specs: Vec<FactorSpec> = build_specs(self, &anchored, None)
            .into_iter()
            .filter(|s| !matches!(s, FactorSpec::Imu { slot } if *slot != 0))
            .collect();
        specs.retain(|s| !matches!(s, FactorSpec::Prior) || self.prior.is_some());

        let m = anchored.len();
        let p = self.pose_dim();
        let dim = m + p;
        let marg_dim = m + STATE_DIM;
        let retained_dim = p - STATE_DIM;

        let mut new_prior: Option<MargPrior> = None;
        if !specs.is_empty() && retained_dim > 0 {
            // Dense H over [lambda block | frame0 | retained frames | cg].
            let blocks = evaluate_all(self, &anchored, &specs);
            let mut h = DMatrix::zeros(dim, dim);
            let mut b = DVector::zeros(dim);
            for blk in &blocks {
                if blk.disabled || blk.gated {
                    continue;
                }
                let mut parts: Vec<(usize, DMatrix<f64>)> = Vec::new();
                for (o, j) in &blk.jacs {
                    parts.push((m + o, j.clone()));
                }
                if let Some((k, jl)) = &blk.lm {
                    parts.push((*k, DMatrix::from_column_slice(jl.nrows(), 1, jl.as_slice())));
                }
                for (i, (o1, j1)) in parts.iter().enumerate() {
                    let g = j1.transpose() * &blk.r;
                    for (row, v) in g.iter().enumerate() {
                        b[o1 + row] -= v;
                    }
                    for (j2i, (o2, j2)) in parts.iter().enumerate().skip(i) {
                        let hb = j1.transpose() * j2;
                        for c in 0..hb.ncols() {
                            for rr in 0..hb.nrows() {
                                h[(o1 + rr, o2 + c)] += hb[(rr, c)];
                                if j2i != i {
                                    h[(o2 + c, o1 + rr)] += hb[(rr, c)];
                                }
                            }
                        }
                    }
                }
            }

            let (hp, bp, regularized) = schur_marginalize(&h, &b, marg_dim);
            if regularized {
                self.diagnostics.marginalization_regularized += 1;
            }
            if let Some((jac, r0)) = information_to_sqrt(&hp, &bp) {
                new_prior = Some(MargPrior {
                    frame_ids: self.frames[1..].iter().map(|f| f.id).collect(),
                    has_cg: self.cg_active,
                    jac,
                    r0,
                    lin_states: self.frames[1..].iter().map(|f| f.state).collect(),
                    lin_cg: self.cg_active.then_some(self.cg),
                });
            }
        } else if self.prior.is_none() {
            // Frame with no factors: nothing to fold in.
            new_prior = None;
        }

        self.prior = new_prior;
        self.frames.remove(0);
        for id in anchored {
            self.landmarks.remove(&id);
        }
        // Defensive: any landmark whose anchor left the window (should be
        // exactly the anchored set) is dropped.
        let orphaned: Vec<u64> = self
            .landmarks
            .iter()
            .filter(|(_, lm)| self.frames.iter().all(|f| f.id != lm.anchor_id))
            .map(|(id, _)| *id)
            .collect();
        for id in orphaned {
            self.landmarks.remove(&id);
        }
        self.cov_cache = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Three-state linear-Gaussian chain; oracle is dense joint Gaussian
    /// conditioning via the full information-matrix inverse.
    #[test]
    fn linear_chain_matches_dense_elimination() {
        // Factors: (x0 - 1)/0.5, (x1 - x0 - 0.5)/0.2, (x2 - x1 - 0.3)/0.1,
        // assembled as J^T J and -J^T r at the zero linearization point.
        let mut h = DMatrix::zeros(3, 3);
        let mut b = DVector::zeros(3);
        let mut add = |cols: &[(usize, f64)], resid: f64, sigma: f64| {
            let w = 1.0 / (sigma * sigma);
            for &(i, ji) in cols {
                b[i] -= w * ji * resid;
                for &(j, jj) in cols {
                    h[(i, j)] += w * ji * jj;
                }
            }
        };
        add(&[(0, 1.0)], -1.0, 0.5);
        add(&[(0, -1.0), (1, 1.0)], -0.5, 0.2);
        add(&[(1, -1.0), (2, 1.0)], -0.3, 0.1);

        let (hp, bp, reg) = schur_marginalize(&h, &b, 1);
        assert!(!reg);

        // Oracle: marginal info of (x1, x2) = inverse of the retained block
        // of the full covariance; marginal mean = retained part of the full
        // mean.
        let full_cov = h.clone().try_inverse().unwrap();
        let mean = &full_cov * &b;
        let marg_cov = full_cov.view((1, 1), (2, 2)).into_owned();
        let marg_info = marg_cov.try_inverse().unwrap();

        assert!((hp.clone() - marg_info).amax() < 1e-10);
        let mean_r = hp.try_inverse().unwrap() * bp;
        assert!((mean_r - mean.rows(1, 2)).amax() < 1e-10);
    }

    #[test]
    fn sqrt_factorization_roundtrip() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let h = &a * a.transpose(); // SPD
        let b = DVector::from_vec(vec![1.0, -2.0, 0.3]);
        let (j, r0) = information_to_sqrt(&h, &b).unwrap();
        assert!((j.transpose() * &j - &h).amax() < 1e-10);
        assert!((j.transpose() * r0 + b).amax() < 1e-10);
    }

    #[test]
    fn rank_deficient_block_is_floored() {
        // Eliminated block has a zero eigenvalue (gauge-like direction).
        let mut h = DMatrix::zeros(3, 3);
        h[(0, 0)] = 1.0; // x0 constrained
        h[(1, 1)] = 0.0; // x1 completely unconstrained
        h[(2, 2)] = 2.0;
        let b = DVector::from_vec(vec![0.5, 0.0, 1.0]);
        let (hp, bp, reg) = schur_marginalize(&h, &b, 2);
        assert!(reg);
        assert!((hp[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((bp[0] - 1.0).abs() < 1e-12);
    }
}
