//! Outlier rejection for BEV ground-feature tracks: a seeded RANSAC over
//! the 2-D rigid transform relating consecutive frames' BEV coordinates
//! (planar ground motion), followed by a least-squares refit on inliers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::BevPoint;

/// Planar rigid motion: cur = R(phi) * prev + t.
#[derive(Debug, Clone, Copy)]
pub struct RigidTransform2 {
    pub phi: f64,
    pub tx: f64,
    pub ty: f64,
}

impl RigidTransform2 {
    pub fn identity() -> Self {
        Self { phi: 0.0, tx: 0.0, ty: 0.0 }
    }
    pub fn apply(&self, p: &BevPoint) -> BevPoint {
        let (s, c) = self.phi.sin_cos();
        BevPoint {
            x_bev: c * p.x_bev - s * p.y_bev + self.tx,
            y_bev: s * p.x_bev + c * p.y_bev + self.ty,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RansacResult {
    pub inliers: Vec<bool>,
    pub transform: RigidTransform2,
    /// False when fewer than 4 pairs were available and everything was kept.
    pub confident: bool,
}

fn fit_two(a: &(BevPoint, BevPoint), b: &(BevPoint, BevPoint)) -> Option<RigidTransform2> {
    // Rotation from the direction change of the chord between the two points.
    let dx0 = b.0.x_bev - a.0.x_bev;
    let dy0 = b.0.y_bev - a.0.y_bev;
    let dx1 = b.1.x_bev - a.1.x_bev;
    let dy1 = b.1.y_bev - a.1.y_bev;
    if dx0.hypot(dy0) < 1e-9 {
        return None;
    }
    let phi = dy1.atan2(dx1) - dy0.atan2(dx0);
    let (s, c) = phi.sin_cos();
    let tx = a.1.x_bev - (c * a.0.x_bev - s * a.0.y_bev);
    let ty = a.1.y_bev - (s * a.0.x_bev + c * a.0.y_bev);
    Some(RigidTransform2 { phi, tx, ty })
}

/// Least-squares 2-D rigid fit (planar Procrustes) over selected pairs.
fn fit_lsq(pairs: &[(BevPoint, BevPoint)], mask: &[bool]) -> Option<RigidTransform2> {
    let n = mask.iter().filter(|&&m| m).count();
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let (mut mx0, mut my0, mut mx1, mut my1) = (0.0, 0.0, 0.0, 0.0);
    for (p, &m) in pairs.iter().zip(mask) {
        if m {
            mx0 += p.0.x_bev;
            my0 += p.0.y_bev;
            mx1 += p.1.x_bev;
            my1 += p.1.y_bev;
        }
    }
    mx0 /= nf;
    my0 /= nf;
    mx1 /= nf;
    my1 /= nf;
    // phi = atan2(sum cross, sum dot) of centered coordinates.
    let (mut cross, mut dot) = (0.0, 0.0);
    for (p, &m) in pairs.iter().zip(mask) {
        if m {
            let (x0, y0) = (p.0.x_bev - mx0, p.0.y_bev - my0);
            let (x1, y1) = (p.1.x_bev - mx1, p.1.y_bev - my1);
            cross += x0 * y1 - y0 * x1;
            dot += x0 * x1 + y0 * y1;
        }
    }
    if cross == 0.0 && dot == 0.0 {
        return None;
    }
    let phi = cross.atan2(dot);
    let (s, c) = phi.sin_cos();
    Some(RigidTransform2 {
        phi,
        tx: mx1 - (c * mx0 - s * my0),
        ty: my1 - (s * mx0 + c * my0),
    })
}

/// RANSAC over matched BEV pairs (prev, cur). Deterministic given the seed.
pub fn homography_ransac(
    pairs: &[(BevPoint, BevPoint)],
    threshold: f64,
    seed: u64,
) -> RansacResult {
    if pairs.len() < 4 {
        return RansacResult {
            inliers: vec![true; pairs.len()],
            transform: fit_lsq(pairs, &vec![true; pairs.len()])
                .unwrap_or_else(RigidTransform2::identity),
            confident: false,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best_mask = vec![false; pairs.len()];
    let mut best_count = 0usize;
    for _ in 0..64 {
        let i = rng.gen_range(0..pairs.len());
        let mut j = rng.gen_range(0..pairs.len() - 1);
        if j >= i {
            j += 1;
        }
        let Some(model) = fit_two(&pairs[i], &pairs[j]) else { continue };
        let mut mask = vec![false; pairs.len()];
        let mut count = 0;
        for (k, p) in pairs.iter().enumerate() {
            let pred = model.apply(&p.0);
            let e = (pred.x_bev - p.1.x_bev).hypot(pred.y_bev - p.1.y_bev);
            if e <= threshold {
                mask[k] = true;
                count += 1;
            }
        }
        if count > best_count {
            best_count = count;
            best_mask = mask;
        }
    }
    if best_count < 2 {
        return RansacResult {
            inliers: vec![true; pairs.len()],
            transform: RigidTransform2::identity(),
            confident: false,
        };
    }
    // Refit on the consensus set, then reclassify once.
    let refined = fit_lsq(pairs, &best_mask).unwrap_or_else(RigidTransform2::identity);
    let mut inliers = vec![false; pairs.len()];
    for (k, p) in pairs.iter().enumerate() {
        let pred = refined.apply(&p.0);
        let e = (pred.x_bev - p.1.x_bev).hypot(pred.y_bev - p.1.y_bev);
        inliers[k] = e <= threshold;
    }
    RansacResult { inliers, transform: refined, confident: true }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn make_pairs(
        n: usize,
        gt: &RigidTransform2,
        rng: &mut impl Rng,
        noise: f64,
    ) -> Vec<(BevPoint, BevPoint)> {
        (0..n)
            .map(|_| {
                let p = BevPoint {
                    x_bev: rng.gen_range(-3.0..3.0),
                    y_bev: rng.gen_range(1.0..15.0),
                };
                let mut q = gt.apply(&p);
                q.x_bev += noise * rng.gen_range(-1.0..1.0);
                q.y_bev += noise * rng.gen_range(-1.0..1.0);
                (p, q)
            })
            .collect()
    }

    #[test]
    fn all_inliers_recovers_motion() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let gt = RigidTransform2 { phi: 0.03, tx: 0.1, ty: -0.8 };
        let pairs = make_pairs(40, &gt, &mut rng, 0.0);
        let res = homography_ransac(&pairs, 0.05, 17);
        assert!(res.confident);
        assert!(res.inliers.iter().all(|&x| x));
        assert_relative_eq!(res.transform.phi, gt.phi, epsilon = 1e-6);
        assert_relative_eq!(res.transform.tx, gt.tx, epsilon = 1e-6);
        assert_relative_eq!(res.transform.ty, gt.ty, epsilon = 1e-6);
    }

    #[test]
    fn thirty_percent_outliers_rejected() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let gt = RigidTransform2 { phi: -0.02, tx: 0.0, ty: -0.6 };
        let mut pairs = make_pairs(28, &gt, &mut rng, 0.01);
        let n_in = pairs.len();
        // Off-plane points: large BEV-parallax errors (>= 0.3 m).
        for _ in 0..12 {
            let p = BevPoint { x_bev: rng.gen_range(-3.0..3.0), y_bev: rng.gen_range(1.0..15.0) };
            let mut q = gt.apply(&p);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            q.y_bev += sign * rng.gen_range(0.3..1.0);
            pairs.push((p, q));
        }
        let res = homography_ransac(&pairs, 0.05, 99);
        let kept_in = res.inliers[..n_in].iter().filter(|&&x| x).count();
        let rejected_out = res.inliers[n_in..].iter().filter(|&&x| !x).count();
        assert!(kept_in as f64 >= 0.95 * n_in as f64, "kept {kept_in}/{n_in}");
        assert!(rejected_out as f64 >= 0.95 * 12.0, "rejected {rejected_out}/12");
    }

    #[test]
    fn too_few_pairs_pass_through() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let gt = RigidTransform2 { phi: 0.0, tx: 0.0, ty: -0.5 };
        let pairs = make_pairs(3, &gt, &mut rng, 0.0);
        let res = homography_ransac(&pairs, 0.05, 1);
        assert!(!res.confident);
        assert_eq!(res.inliers, vec![true; 3]);
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let gt = RigidTransform2 { phi: 0.01, tx: 0.05, ty: -0.7 };
        let mut pairs = make_pairs(30, &gt, &mut rng, 0.02);
        for _ in 0..10 {
            let p = BevPoint { x_bev: rng.gen_range(-3.0..3.0), y_bev: rng.gen_range(1.0..15.0) };
            let q = BevPoint { x_bev: rng.gen_range(-3.0..3.0), y_bev: rng.gen_range(1.0..15.0) };
            pairs.push((p, q));
        }
        let a = homography_ransac(&pairs, 0.05, 7);
        let b = homography_ransac(&pairs, 0.05, 7);
        assert_eq!(a.inliers, b.inliers);
        assert_eq!(a.transform.phi.to_bits(), b.transform.phi.to_bits());
    }
}
