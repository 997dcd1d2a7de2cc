//! Trajectory alignment and error metrics.

use nalgebra::Matrix3;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{Rotation, SimilarityTransform, Vec3};

/// Least-squares similarity taking `est` onto `gt` (closed form from the
/// centered cross-covariance). Needs three non-collinear correspondences.
pub fn align_sim3(est: &[Vec3], gt: &[Vec3]) -> Result<SimilarityTransform> {
    check_lengths(est, gt)?;
    if est.len() < 3 {
        return Err(Error::InsufficientSupport {
            what: "alignment correspondences",
            have: est.len(),
            need: 3,
        });
    }
    let n = est.len() as f64;
    let mx = est.iter().sum::<Vec3>() / n;
    let my = gt.iter().sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for (x, y) in est.iter().zip(gt) {
        let (dx, dy) = (x - mx, y - my);
        cov += dy * dx.transpose();
        var_x += dx.norm_squared();
    }
    cov /= n;
    var_x /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v"));
    let sv = svd.singular_values;
    let spread = sv.max();
    if !(var_x > 0.0)
        || sv
            .iter()
            .filter(|s| **s > 1e-12 * spread.max(f64::MIN_POSITIVE))
            .count()
            < 2
    {
        return Err(Error::Degenerate(
            "collinear or coincident points cannot fix a similarity".into(),
        ));
    }
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    // Singular values are sorted, so the flip lands on the smallest.
    let r = u * d * v_t;
    let trace: f64 = (0..3).map(|i| sv[i] * d[(i, i)]).sum();
    let scale = trace / var_x;
    let rotation = Rotation::from_matrix(&r);
    let translation = my - rotation.rotate(&mx) * scale;
    SimilarityTransform::new(scale, rotation, translation)
}

/// Least-squares scale `s` minimizing `sum |s x - y|^2`, for trajectories
/// that already share origin and orientation (e.g. keyframe-anchored).
pub fn align_scale(est: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    check_lengths(est, gt)?;
    let num: f64 = est.iter().zip(gt).map(|(x, y)| x.dot(y)).sum();
    let den: f64 = est.iter().map(|x| x.norm_squared()).sum();
    if !(den > 0.0) || !(num > 0.0) {
        return Err(Error::Degenerate(
            "estimate has no positive projection on the ground truth".into(),
        ));
    }
    Ok(num / den)
}

fn check_lengths(est: &[Vec3], gt: &[Vec3]) -> Result<()> {
    if est.len() != gt.len() {
        return Err(Error::InvalidInput(format!(
            "trajectory lengths differ ({} vs {})",
            est.len(),
            gt.len()
        )));
    }
    Ok(())
}

pub fn apply_all(t: &SimilarityTransform, xs: &[Vec3]) -> Vec<Vec3> {
    xs.iter().map(|x| t.apply(x)).collect()
}

/// Per-camera error over the mean spacing of consecutive ground-truth
/// cameras.
pub fn normalized_position_error(aligned: &[Vec3], gt: &[Vec3]) -> Result<Vec<f64>> {
    check_lengths(aligned, gt)?;
    if gt.len() < 2 {
        return Err(Error::InvalidInput(
            "normalizer needs at least two cameras".into(),
        ));
    }
    let spacing = gt.windows(2).map(|w| (w[1] - w[0]).norm()).sum::<f64>() / (gt.len() - 1) as f64;
    if !(spacing > 0.0) {
        return Err(Error::Degenerate("ground-truth cameras coincide".into()));
    }
    Ok(aligned
        .iter()
        .zip(gt)
        .map(|(a, g)| (a - g).norm() / spacing)
        .collect())
}

/// Root mean squared position error, in ground-truth units.
pub fn keyframe_rmse(aligned: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    check_lengths(aligned, gt)?;
    if gt.is_empty() {
        return Err(Error::InvalidInput("no keyframes to compare".into()));
    }
    let ss: f64 = aligned
        .iter()
        .zip(gt)
        .map(|(a, g)| (a - g).norm_squared())
        .sum();
    Ok((ss / gt.len() as f64).sqrt())
}

/// Aligns with a full similarity when the trajectory allows it, otherwise
/// (collinear or too short) with scale only.
pub fn align_best(est: &[Vec3], gt: &[Vec3]) -> Result<Vec<Vec3>> {
    match align_sim3(est, gt) {
        Ok(t) => Ok(apply_all(&t, est)),
        Err(Error::Degenerate(_)) | Err(Error::InsufficientSupport { .. }) => {
            let s = align_scale(est, gt)?;
            Ok(est.iter().map(|x| x * s).collect())
        }
        Err(e) => Err(e),
    }
}

/// Flat summary of one trajectory comparison.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryMetrics {
    pub cameras: usize,
    pub rmse: f64,
    pub mean_normalized_error: f64,
    pub max_normalized_error: f64,
}

impl TrajectoryMetrics {
    pub fn compute(est: &[Vec3], gt: &[Vec3]) -> Result<Self> {
        let aligned = align_best(est, gt)?;
        let rmse = keyframe_rmse(&aligned, gt)?;
        let (mean, max) = match normalized_position_error(&aligned, gt) {
            Ok(e) => (
                e.iter().sum::<f64>() / e.len() as f64,
                e.iter().cloned().fold(0.0, f64::max),
            ),
            Err(_) => (0.0, 0.0),
        };
        Ok(TrajectoryMetrics {
            cameras: gt.len(),
            rmse,
            mean_normalized_error: mean,
            max_normalized_error: max,
        })
    }

    /// `key value` lines.
    pub fn to_key_value(&self) -> String {
        format!(
            "cameras {}\nrmse {}\nmean_normalized_error {}\nmax_normalized_error {}\n",
            self.cameras, self.rmse, self.mean_normalized_error, self.max_normalized_error
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::exp_so3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut impl Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                )
            })
            .collect()
    }

    fn cost(t: &SimilarityTransform, x: &[Vec3], y: &[Vec3]) -> f64 {
        x.iter()
            .zip(y)
            .map(|(a, b)| (t.apply(a) - b).norm_squared())
            .sum()
    }

    #[test]
    fn identity_and_known_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = cloud(&mut rng, 20);
        let t = align_sim3(&x, &x).unwrap();
        assert!(
            (t.scale - 1.0).abs() < 1e-12
                && t.rotation.angle() < 1e-12
                && t.translation.norm() < 1e-12
        );
        let truth = SimilarityTransform::new(
            2.5,
            exp_so3(&Vec3::new(0.4, -1.2, 2.0)),
            Vec3::new(1.0, -3.0, 7.0),
        )
        .unwrap();
        let y = apply_all(&truth, &x);
        let t = align_sim3(&x, &y).unwrap();
        assert!((t.scale - truth.scale).abs() < 1e-10);
        assert!(t.rotation.angle_to(&truth.rotation) < 1e-10);
        assert!((t.translation - truth.translation).norm() < 1e-10);
    }

    #[test]
    fn reflection_is_never_returned() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = cloud(&mut rng, 10);
        let y: Vec<Vec3> = x.iter().map(|p| Vec3::new(-p.x, p.y, p.z)).collect();
        let t = align_sim3(&x, &y).unwrap();
        assert!((t.rotation.matrix().determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn alignment_beats_random_perturbations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = cloud(&mut rng, 15);
        let y: Vec<Vec3> = x
            .iter()
            .map(|p| {
                exp_so3(&Vec3::new(0.1, 0.2, 0.3)).rotate(p) * 1.7
                    + Vec3::new(
                        rng.random_range(-0.5..0.5),
                        0.3,
                        rng.random_range(-0.5..0.5),
                    )
            })
            .collect();
        let t = align_sim3(&x, &y).unwrap();
        let best = cost(&t, &x, &y);
        for _ in 0..10_000 {
            let p = SimilarityTransform::new(
                t.scale * (1.0 + rng.random_range(-1e-3..1e-3)),
                exp_so3(&Vec3::new(
                    rng.random_range(-1e-3..1e-3),
                    rng.random_range(-1e-3..1e-3),
                    rng.random_range(-1e-3..1e-3),
                )) * t.rotation,
                t.translation
                    + Vec3::new(
                        rng.random_range(-1e-3..1e-3),
                        rng.random_range(-1e-3..1e-3),
                        rng.random_range(-1e-3..1e-3),
                    ),
            )
            .unwrap();
            assert!(cost(&p, &x, &y) >= best - 1e-9);
        }
    }

    #[test]
    fn degenerate_inputs() {
        let line: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(
            align_sim3(&line, &line),
            Err(Error::Degenerate(_))
        ));
        assert!(align_sim3(&line[..2], &line[..2]).is_err());
        assert!(align_sim3(&line, &line[..4]).is_err());
        let aligned = align_best(&line.iter().map(|p| p * 0.5).collect::<Vec<_>>(), &line).unwrap();
        assert!(aligned
            .iter()
            .zip(&line)
            .all(|(a, b)| (a - b).norm() < 1e-12));
    }

    #[test]
    fn normalized_error_units_and_oracle() {
        let gt: Vec<Vec3> = (0..5)
            .map(|i| Vec3::new(0.5 * i as f64, 0.0, 0.0))
            .collect();
        let mut est = gt.clone();
        assert!(normalized_position_error(&est, &gt)
            .unwrap()
            .iter()
            .all(|e| *e == 0.0));
        est[2].y += 0.5;
        let e = normalized_position_error(&est, &gt).unwrap();
        assert!((e[2] - 1.0).abs() < 1e-15);
        assert!(normalized_position_error(&gt[..1], &gt[..1]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = cloud(&mut rng, 12);
        let b = cloud(&mut rng, 12);
        let mean_gap = (1..12).map(|i| (b[i] - b[i - 1]).norm()).sum::<f64>() / 11.0;
        let got = normalized_position_error(&a, &b).unwrap();
        for i in 0..12 {
            assert!((got[i] - (a[i] - b[i]).norm() / mean_gap).abs() < 1e-12);
        }
    }

    #[test]
    fn rmse_cases() {
        assert_eq!(keyframe_rmse(&[Vec3::x()], &[Vec3::x()]).unwrap(), 0.0);
        assert!(
            (keyframe_rmse(&[Vec3::new(0.0, 3.0, 4.0)], &[Vec3::zeros()]).unwrap() - 5.0).abs()
                < 1e-15
        );
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = cloud(&mut rng, 30);
        let b = cloud(&mut rng, 30);
        let oracle = (a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).norm_squared())
            .sum::<f64>()
            / 30.0)
            .sqrt();
        assert!((keyframe_rmse(&a, &b).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn metrics_invariant_under_common_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt = cloud(&mut rng, 20);
        let est: Vec<Vec3> = gt
            .iter()
            .map(|p| p * 0.3 + Vec3::new(rng.random_range(-0.1..0.1), 0.0, 0.05))
            .collect();
        let a = TrajectoryMetrics::compute(&est, &gt).unwrap();
        let t = SimilarityTransform::new(
            4.0,
            exp_so3(&Vec3::new(1.0, 0.2, -0.7)),
            Vec3::new(9.0, 1.0, 2.0),
        )
        .unwrap();
        let b = TrajectoryMetrics::compute(&apply_all(&t, &est), &apply_all(&t, &gt)).unwrap();
        assert!((a.rmse * 4.0 - b.rmse).abs() < 1e-9);
        assert!((a.mean_normalized_error - b.mean_normalized_error).abs() < 1e-9);
    }
}
