//! Translation direction between a keyframe and a frame with known rotation.
//!
//! With the rotation compensated, each correspondence spans an epipolar
//! plane through both camera centers with normal `n_k = p_k x p_jk`. The
//! translation is the common null direction of those normals: two
//! correspondences give a hypothesis (`n_1 x n_2`), and the inlier set is
//! refit by the smallest right singular vector of the stacked normals.

use nalgebra::{Matrix3, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Rotation, UnitBearing, Vec3};
use crate::rank1::ray_midpoint_params;
use crate::tracks::TrackId;

#[derive(Clone, Debug, PartialEq)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Inlier threshold on the angular distance (radians) of the rotated
    /// frame bearing from the epipolar plane spanned by `t` and `p_k`.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            iterations: 200,
            threshold: 1e-2,
            seed: 0,
        }
    }
}

/// A correspondence: keyframe bearing and frame bearing (in the frame's own
/// camera coordinates).
#[derive(Clone, Copy, Debug)]
pub struct BearingPair {
    pub track: TrackId,
    pub keyframe: UnitBearing,
    pub frame: UnitBearing,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelativeMotion {
    /// Keyframe-to-frame rotation (world-to-camera convention).
    pub rotation: Rotation,
    /// Direction from the keyframe center toward the frame center, in
    /// keyframe coordinates.
    pub translation_dir: UnitBearing,
    pub inlier_ids: Vec<TrackId>,
    /// Null direction poorly separated from the next singular direction.
    pub low_parallax: bool,
}

/// Angular distance of `p_jk` from the plane spanned by `t` and `p_k`.
/// Zero when `t` is parallel to `p_k` (the point sits on the epipole).
pub fn epipolar_residual(t: &Vec3, p_k: &Vec3, p_jk: &Vec3) -> f64 {
    let n = t.cross(p_k);
    let nn = n.norm();
    if nn < 1e-15 {
        return 0.0;
    }
    (p_jk.dot(&n) / nn).abs()
}

struct Prepared {
    p_k: Vec<Vec3>,
    p_jk: Vec<Vec3>,
    normals: Vec<Vec3>,
}

fn prepare(pairs: &[BearingPair], r: &Rotation) -> Prepared {
    let p_k: Vec<Vec3> = pairs.iter().map(|p| *p.keyframe.as_vec()).collect();
    let p_jk: Vec<Vec3> = pairs
        .iter()
        .map(|p| r.inverse_rotate(p.frame.as_vec()))
        .collect();
    let normals = p_k.iter().zip(&p_jk).map(|(a, b)| a.cross(b)).collect();
    Prepared { p_k, p_jk, normals }
}

fn inliers_of(prep: &Prepared, t: &Vec3, threshold: f64) -> (Vec<usize>, f64) {
    let mut idx = Vec::new();
    let mut cost = 0.0;
    for i in 0..prep.p_k.len() {
        let r = epipolar_residual(t, &prep.p_k[i], &prep.p_jk[i]);
        if r < threshold {
            idx.push(i);
            cost += r;
        } else {
            cost += threshold;
        }
    }
    (idx, cost)
}

/// Smallest singular direction of the stacked normals and the ratio of the
/// two smallest singular values.
fn null_direction(normals: impl Iterator<Item = Vec3>) -> (Vec3, f64, f64) {
    let mut a = Matrix3::zeros();
    for n in normals {
        a += n * n.transpose();
    }
    let eig = SymmetricEigen::new(a);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let v: Vec3 = eig.eigenvectors.column(order[0]).into();
    let s_min = eig.eigenvalues[order[0]].max(0.0).sqrt();
    let s_mid = eig.eigenvalues[order[1]].max(0.0).sqrt();
    (v / v.norm(), s_min, s_mid)
}

/// Number of correspondences reconstructed in front of both cameras.
fn cheirality_support(prep: &Prepared, idx: &[usize], t: &UnitBearing) -> usize {
    idx.iter()
        .filter(|&&i| {
            let pk = UnitBearing::new_unchecked(prep.p_k[i]);
            let pjk = UnitBearing::new_unchecked(prep.p_jk[i]);
            ray_midpoint_params(t, &pk, &pjk).is_ok()
        })
        .count()
}

pub fn two_point_translation(
    pairs: &[BearingPair],
    rotation: &Rotation,
    config: &RansacConfig,
) -> Result<RelativeMotion> {
    let n = pairs.len();
    if n < 2 {
        return Err(Error::InsufficientSupport {
            what: "two-point correspondences",
            have: n,
            need: 2,
        });
    }
    let prep = prepare(pairs, rotation);
    let scale: f64 = prep.normals.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if scale < 1e-14 {
        return Err(Error::Degenerate(
            "zero parallax: every epipolar normal vanishes".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..config.iterations {
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        let (na, nb) = (prep.normals[a], prep.normals[b]);
        let h = na.cross(&nb);
        let hn = h.norm();
        if hn < 1e-12 * na.norm() * nb.norm() || hn == 0.0 {
            continue;
        }
        let (idx, cost) = inliers_of(&prep, &(h / hn), config.threshold);
        let better = match &best {
            None => true,
            Some((bi, bc)) => idx.len() > bi.len() || (idx.len() == bi.len() && cost < *bc),
        };
        if better {
            best = Some((idx, cost));
        }
    }
    let Some((mut inliers, _)) = best else {
        return Err(Error::Degenerate(
            "all two-point hypotheses are degenerate".into(),
        ));
    };
    if inliers.len() < 2 {
        inliers = (0..n).collect();
    }

    let (mut t, s_min, s_mid) = null_direction(inliers.iter().map(|&i| prep.normals[i]));
    // One re-selection against the refit direction.
    let (refined, _) = inliers_of(&prep, &t, config.threshold);
    if refined.len() >= inliers.len() {
        inliers = refined;
        t = null_direction(inliers.iter().map(|&i| prep.normals[i])).0;
    }
    let low_parallax = s_mid < 10.0 * s_min || s_mid < 1e-12;

    let tb = UnitBearing::new_unchecked(t);
    let pos = cheirality_support(&prep, &inliers, &tb);
    let neg = cheirality_support(&prep, &inliers, &(-tb));
    let dir = if neg > pos { -tb } else { tb };

    Ok(RelativeMotion {
        rotation: *rotation,
        translation_dir: dir,
        inlier_ids: inliers.iter().map(|&i| pairs[i].track).collect(),
        low_parallax,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::exp_so3;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    struct Scene {
        pairs: Vec<BearingPair>,
        rotation: Rotation,
        t_true: Vec3,
    }

    /// Keyframe at the origin, frame at `c` with world-to-camera rotation `r`.
    fn scene(c: Vec3, r: Rotation, n: usize, noise: f64, seed: u64) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise.max(1e-300)).unwrap();
        let mut jitter = |v: Vec3| {
            if noise == 0.0 {
                return UnitBearing::new(v).unwrap();
            }
            let u = v.normalize();
            let a = u.cross(&Vec3::x()).normalize();
            let b = u.cross(&a);
            UnitBearing::new(u + a * normal.sample(&mut rng) + b * normal.sample(&mut rng)).unwrap()
        };
        let mut pairs = vec![];
        let mut prng = ChaCha8Rng::seed_from_u64(seed + 1000);
        for k in 0..n {
            let z = prng.random_range(5.0..10.0);
            let x = Vec3::new(
                prng.random_range(-0.5..0.5) * z,
                prng.random_range(-0.4..0.4) * z,
                z,
            );
            let kb = jitter(x);
            let fb = jitter(r.rotate(&(x - c)));
            pairs.push(BearingPair {
                track: k,
                keyframe: kb,
                frame: fb,
            });
        }
        Scene {
            pairs,
            rotation: r,
            t_true: c.normalize(),
        }
    }

    #[test]
    fn exact_data_recovers_direction() {
        let r = exp_so3(&Vec3::new(0.02, -0.05, 0.01));
        let s = scene(Vec3::new(0.3, -0.1, 0.2), r, 50, 0.0, 1);
        let m = two_point_translation(&s.pairs, &s.rotation, &RansacConfig::default()).unwrap();
        assert!(m.translation_dir.as_vec().angle(&s.t_true) < 1e-8);
        // every correspondence is an inlier at any positive threshold
        let tight = RansacConfig {
            threshold: 1e-9,
            ..Default::default()
        };
        let m = two_point_translation(&s.pairs, &s.rotation, &tight).unwrap();
        assert_eq!(m.inlier_ids.len(), 50);
        assert!(!m.low_parallax);
    }

    #[test]
    fn forward_motion_sign() {
        let s = scene(Vec3::new(0.0, 0.0, 0.05), Rotation::identity(), 80, 0.0, 2);
        let m = two_point_translation(&s.pairs, &s.rotation, &RansacConfig::default()).unwrap();
        assert!(m.translation_dir.as_vec().angle(&s.t_true) < 1e-8);
    }

    #[test]
    fn zero_parallax_is_degenerate() {
        let s = scene(
            Vec3::zeros(),
            exp_so3(&Vec3::new(0.1, 0.0, 0.0)),
            30,
            0.0,
            3,
        );
        assert!(matches!(
            two_point_translation(&s.pairs, &s.rotation, &RansacConfig::default()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn too_few_pairs() {
        let s = scene(Vec3::x(), Rotation::identity(), 1, 0.0, 4);
        assert!(matches!(
            two_point_translation(&s.pairs, &s.rotation, &RansacConfig::default()),
            Err(Error::InsufficientSupport { .. })
        ));
    }

    #[test]
    fn rotation_invariance() {
        let r = exp_so3(&Vec3::new(0.05, 0.02, -0.03));
        let s = scene(Vec3::new(0.2, 0.05, 0.1), r, 60, 2e-3, 5);
        let q = exp_so3(&Vec3::new(0.3, -0.7, 0.2));
        // Re-express the keyframe and frame camera coordinates through q.
        let rotated: Vec<BearingPair> = s
            .pairs
            .iter()
            .map(|p| BearingPair {
                track: p.track,
                keyframe: p.keyframe.rotated(&q),
                frame: p.frame.rotated(&q),
            })
            .collect();
        let r2 = q * s.rotation * q.inverse();
        let cfg = RansacConfig::default();
        let a = two_point_translation(&s.pairs, &s.rotation, &cfg).unwrap();
        let b = two_point_translation(&rotated, &r2, &cfg).unwrap();
        let mapped = q.rotate(a.translation_dir.as_vec());
        assert!((mapped - b.translation_dir.as_vec()).norm() < 1e-9);
        assert_eq!(a.inlier_ids, b.inlier_ids);
        let pa = prepare(&s.pairs, &s.rotation);
        let pb = prepare(&rotated, &r2);
        for i in 0..s.pairs.len() {
            let ra = epipolar_residual(a.translation_dir.as_vec(), &pa.p_k[i], &pa.p_jk[i]);
            let rb = epipolar_residual(b.translation_dir.as_vec(), &pb.p_k[i], &pb.p_jk[i]);
            assert!((ra - rb).abs() < 1e-9);
        }
    }

    /// Exhaustive oracle: every pair hypothesis, best by inlier count, then the
    /// same least-squares refit and re-selection on its inliers. Written independently of the
    /// RANSAC loop.
    fn exhaustive_oracle(pairs: &[BearingPair], r: &Rotation, threshold: f64, truth: &Vec3) -> f64 {
        let pk: Vec<Vec3> = pairs.iter().map(|p| *p.keyframe.as_vec()).collect();
        let pjk: Vec<Vec3> = pairs
            .iter()
            .map(|p| r.matrix().transpose() * p.frame.as_vec())
            .collect();
        let normals: Vec<Vec3> = pk.iter().zip(&pjk).map(|(a, b)| a.cross(b)).collect();
        let resid = |t: &Vec3, i: usize| {
            let n = t.cross(&pk[i]);
            (pjk[i].dot(&n) / n.norm()).abs()
        };
        let score = |h: &Vec3| {
            let inl: Vec<usize> = (0..pairs.len())
                .filter(|&i| resid(h, i) < threshold)
                .collect();
            let cost: f64 = (0..pairs.len()).map(|i| resid(h, i).min(threshold)).sum();
            (inl, cost)
        };
        let mut best: (Vec<usize>, f64) = (vec![], f64::INFINITY);
        for a in 0..pairs.len() {
            for b in a + 1..pairs.len() {
                let h = normals[a].cross(&normals[b]);
                if h.norm() < 1e-15 {
                    continue;
                }
                let (inl, cost) = score(&h.normalize());
                if inl.len() > best.0.len() || (inl.len() == best.0.len() && cost < best.1) {
                    best = (inl, cost);
                }
            }
        }
        let refit = |idx: &[usize]| {
            let mut stacked = nalgebra::DMatrix::zeros(idx.len(), 3);
            for (row, &i) in idx.iter().enumerate() {
                stacked.set_row(row, &normals[i].transpose());
            }
            let svd = stacked.svd(false, true);
            let vt = svd.v_t.unwrap();
            let (imin, _) = svd
                .singular_values
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .unwrap();
            Vec3::new(vt[(imin, 0)], vt[(imin, 1)], vt[(imin, 2)])
        };
        let mut t = refit(&best.0);
        let (again, _) = score(&t);
        if again.len() >= best.0.len() {
            t = refit(&again);
        }
        t.angle(truth).min(t.angle(&-truth))
    }

    #[test]
    fn noisy_matches_exhaustive_pair_oracle() {
        // Pixel noise of 3 px at f ~ 693 px.
        let sigma = 3.0 / 692.82;
        let mut ours = vec![];
        let mut oracle = vec![];
        for trial in 0..200 {
            let r = exp_so3(&Vec3::new(0.01, 0.03, -0.02));
            let s = scene(Vec3::new(0.6, 0.1, 0.3), r, 60, sigma, 100 + trial);
            let cfg = RansacConfig {
                seed: trial,
                ..Default::default()
            };
            let m = two_point_translation(&s.pairs, &s.rotation, &cfg).unwrap();
            ours.push(m.translation_dir.as_vec().angle(&s.t_true));
            oracle.push(exhaustive_oracle(
                &s.pairs,
                &s.rotation,
                cfg.threshold,
                &s.t_true,
            ));
        }
        let med = |v: &mut Vec<f64>| {
            v.sort_by(|a, b| a.total_cmp(b));
            0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
        };
        let (a, b) = (med(&mut ours), med(&mut oracle));
        assert!((a - b).abs() <= 0.05 * b, "ours {a} oracle {b}");
    }
}
