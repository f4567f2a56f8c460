//! Uncertainty-weighted RANSAC over landmark tracks.

use nalgebra::{Matrix3, Vector3};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RansacConfig;
use crate::error::{Error, Result};
use crate::geometry::RigidTransform;

/// A landmark seen in both initialization snapshots.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Track {
    pub id: u8,
    pub start: Vector3<f64>,
    pub end: Vector3<f64>,
    /// Saliency-adjusted covariance at the end snapshot.
    pub cov: Matrix3<f64>,
}

impl Track {
    /// Sampling weight: inverse of the covariance trace.
    pub fn weight(&self) -> f64 {
        1.0 / self.cov.trace().max(1e-12)
    }
}

/// Least-squares rigid transform mapping `src` onto `dst` with per-point
/// weights (Kabsch). Returns `None` for fewer than three points, degenerate
/// (collinear) configurations, or non-positive total weight.
pub fn rigid_alignment(src: &[Vector3<f64>], dst: &[Vector3<f64>], weights: &[f64]) -> Option<RigidTransform> {
    if src.len() < 3 || src.len() != dst.len() || src.len() != weights.len() {
        return None;
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let centroid = |pts: &[Vector3<f64>]| pts.iter().zip(weights).map(|(p, w)| p * *w).sum::<Vector3<f64>>() / total;
    let cs = centroid(src);
    let cd = centroid(dst);
    let mut h = Matrix3::zeros();
    for ((s, d), w) in src.iter().zip(dst).zip(weights) {
        h += (s - cs) * (d - cd).transpose() * *w;
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut sv = svd.singular_values;
    sv.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    if sv[1] <= 1e-12 * sv[0].max(1e-300) {
        return None;
    }
    let v = v_t.transpose();
    // Flip the weakest direction if the best orthogonal fit is a reflection.
    let d = (v * u.transpose()).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = v * correction * u.transpose();
    Some(RigidTransform::new(rotation, cd - rotation * cs))
}

/// Draws track indices with probability proportional to their weights.
#[derive(Clone, Debug)]
pub struct WeightedSampler {
    dist: WeightedIndex<f64>,
    len: usize,
}

impl WeightedSampler {
    pub fn new(weights: &[f64]) -> Result<Self> {
        let dist = WeightedIndex::new(weights.iter().copied())
            .map_err(|e| Error::InsufficientData(format!("ransac weights: {e}")))?;
        Ok(Self { dist, len: weights.len() })
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> usize {
        self.dist.sample(rng)
    }

    /// `k` distinct indices, rejection-sampled.
    pub fn draw_distinct<R: Rng>(&self, rng: &mut R, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k.min(self.len) {
            let i = self.draw(rng);
            if !out.contains(&i) {
                out.push(i);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RansacOutcome {
    /// Transform carrying start positions to end positions.
    pub transform: RigidTransform,
    pub inliers: Vec<u8>,
    pub outliers: Vec<u8>,
}

fn collinear(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> bool {
    let area = (b - a).cross(&(c - a)).norm();
    let scale = (b - a).norm().max((c - a).norm()).max(1e-12);
    area < 1e-6 * scale * scale
}

fn weighted_fit(tracks: &[Track], idx: &[usize]) -> Option<RigidTransform> {
    let src: Vec<_> = idx.iter().map(|&i| tracks[i].start).collect();
    let dst: Vec<_> = idx.iter().map(|&i| tracks[i].end).collect();
    let w: Vec<_> = idx.iter().map(|&i| tracks[i].weight()).collect();
    rigid_alignment(&src, &dst, &w)
}

/// Capped, covariance-weighted squared residuals (MSAC cost) and the inlier
/// set of a candidate transform.
fn score(tracks: &[Track], t: &RigidTransform, threshold: f64) -> (f64, Vec<usize>) {
    let mut cost = 0.0;
    let mut inliers = Vec::new();
    for (i, tr) in tracks.iter().enumerate() {
        let r = t.apply(&tr.start) - tr.end;
        let cap = threshold * threshold * 3.0 / tr.cov.trace().max(1e-12);
        let e = tr.cov.try_inverse().map_or(f64::INFINITY, |inv| r.dot(&(inv * r)));
        cost += e.min(cap);
        if r.norm() < threshold {
            inliers.push(i);
        }
    }
    (cost, inliers)
}

/// Robust rigid transform between two snapshots of landmark tracks.
pub fn ransac(tracks: &[Track], cfg: &RansacConfig) -> Result<RansacOutcome> {
    if tracks.len() < 3 || tracks.len() < cfg.min_inliers {
        return Err(Error::InsufficientData(format!(
            "{} tracks, need at least {}",
            tracks.len(),
            cfg.min_inliers.max(3)
        )));
    }
    let weights: Vec<f64> = tracks.iter().map(Track::weight).collect();
    let sampler = WeightedSampler::new(&weights)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..cfg.iterations {
        let idx = sampler.draw_distinct(&mut rng, 3);
        let [a, b, c] = [idx[0], idx[1], idx[2]];
        if collinear(&tracks[a].start, &tracks[b].start, &tracks[c].start) {
            continue;
        }
        let Some(t) = weighted_fit(tracks, &idx) else { continue };
        let (cost, inliers) = score(tracks, &t, cfg.inlier_threshold);
        if best.as_ref().is_none_or(|(bc, _)| cost < *bc) {
            best = Some((cost, inliers));
        }
    }
    let (_, mut inliers) = best.ok_or_else(|| Error::InsufficientData("no non-degenerate sample".into()))?;
    if inliers.len() < cfg.min_inliers.max(3) {
        return Err(Error::InsufficientData(format!("{} inliers, need {}", inliers.len(), cfg.min_inliers)));
    }
    let mut transform = weighted_fit(tracks, &inliers).ok_or_else(|| Error::Degenerate("inlier set is degenerate".into()))?;
    let (_, refit) = score(tracks, &transform, cfg.inlier_threshold);
    if refit.len() >= cfg.min_inliers.max(3) && refit != inliers {
        if let Some(t) = weighted_fit(tracks, &refit) {
            transform = t;
            inliers = refit;
        }
    }
    let inlier_ids: Vec<u8> = inliers.iter().map(|&i| tracks[i].id).collect();
    let outliers = tracks.iter().map(|t| t.id).filter(|id| !inlier_ids.contains(id)).collect();
    Ok(RansacOutcome { transform, inliers: inlier_ids, outliers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::exp_so3;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cloud() -> Vec<Vector3<f64>> {
        (0..12)
            .map(|i| {
                let f = i as f64;
                Vector3::new((f * 0.7).sin() * 0.1, (f * 1.3).cos() * 0.08, (f * 0.4).sin() * 0.05 + f * 0.003)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn alignment_recovers_noiseless_transform(
            w in prop::array::uniform3(-3.0f64..3.0),
            t in prop::array::uniform3(-1.0f64..1.0),
        ) {
            let truth = RigidTransform::new(exp_so3(&Vector3::from(w)), Vector3::from(t));
            let src = cloud();
            let dst: Vec<_> = src.iter().map(|p| truth.apply(p)).collect();
            let weights: Vec<f64> = (0..src.len()).map(|i| 1.0 + i as f64).collect();
            let est = rigid_alignment(&src, &dst, &weights).unwrap();
            prop_assert!((est.rotation - truth.rotation).norm() < 1e-8);
            prop_assert!((est.translation - truth.translation).norm() < 1e-8);
        }
    }

    #[test]
    fn alignment_never_returns_reflection() {
        let src = cloud();
        let mirror: Vec<_> = src.iter().map(|p| Vector3::new(-p.x, p.y, p.z)).collect();
        let est = rigid_alignment(&src, &mirror, &vec![1.0; src.len()]).unwrap();
        assert_relative_eq!(est.rotation.determinant(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn alignment_rejects_collinear_points() {
        let src: Vec<_> = (0..4).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert!(rigid_alignment(&src, &src, &[1.0; 4]).is_none());
    }

    #[test]
    fn sampler_frequencies_follow_weights() {
        let weights = [1.0, 2.0, 3.0, 4.0, 10.0];
        let sampler = WeightedSampler::new(&weights).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            counts[sampler.draw(&mut rng)] += 1;
        }
        let total: f64 = weights.iter().sum();
        for (c, w) in counts.iter().zip(weights) {
            let expected = w / total;
            let observed = *c as f64 / n as f64;
            assert!((observed - expected).abs() / expected < 0.02, "{observed} vs {expected}");
        }
    }

    #[test]
    fn ransac_flags_moving_tracks() {
        let truth = RigidTransform::new(exp_so3(&Vector3::new(0.0, 0.2, 0.1)), Vector3::new(0.05, 0.0, -0.02));
        let mut tracks: Vec<Track> = cloud()
            .iter()
            .enumerate()
            .map(|(i, p)| Track { id: i as u8, start: *p, end: truth.apply(p), cov: Matrix3::identity() * 1e-4 })
            .collect();
        tracks[3].end += Vector3::new(0.05, 0.0, 0.0);
        tracks[9].end += Vector3::new(0.0, -0.04, 0.03);
        let out = ransac(&tracks, &RansacConfig::default()).unwrap();
        assert_eq!(out.outliers, vec![3, 9]);
        assert_relative_eq!(out.transform.rotation, truth.rotation, epsilon = 1e-8);
    }

    #[test]
    fn ransac_needs_enough_inliers() {
        let tracks: Vec<Track> = cloud()
            .iter()
            .take(4)
            .enumerate()
            .map(|(i, p)| Track { id: i as u8, start: *p, end: *p, cov: Matrix3::identity() })
            .collect();
        assert!(matches!(ransac(&tracks, &RansacConfig::default()), Err(Error::InsufficientData(_))));
    }
}
