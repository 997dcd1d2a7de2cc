//! Absolute pose from 3D points and their pixels: a linear six-point
//! hypothesis inside RANSAC, followed by Levenberg-Marquardt refinement of
//! the reprojection error.

use nalgebra::{DMatrix, Matrix3x4, Matrix6, Vector6};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{exp_so3, CameraPose, Intrinsics, Mat3, Rotation, UnitBearing, Vec2, Vec3};
use crate::refine::point_jacobian;

#[derive(Clone, Debug, PartialEq)]
pub struct PnpConfig {
    pub iterations: usize,
    /// Inlier threshold on the reprojection error, in pixels.
    pub threshold_px: f64,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for PnpConfig {
    fn default() -> Self {
        PnpConfig {
            iterations: 500,
            threshold_px: 2.0,
            min_inliers: 6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PnpResult {
    pub pose: CameraPose,
    /// Indices into the input correspondences.
    pub inliers: Vec<usize>,
    /// Root mean squared reprojection error over the inliers, in pixels.
    pub rms_px: f64,
}

/// Linear pose from at least six correspondences (bearings in the camera).
pub fn dlt_pose(points: &[Vec3], bearings: &[UnitBearing]) -> Result<CameraPose> {
    let n = points.len();
    if n < 6 || bearings.len() != n {
        return Err(Error::InsufficientSupport {
            what: "linear pose correspondences",
            have: n.min(bearings.len()),
            need: 6,
        });
    }
    // Normalize the points for conditioning: X = s X' + mu.
    let mu = points.iter().sum::<Vec3>() / n as f64;
    let s = (points.iter().map(|x| (x - mu).norm_squared()).sum::<f64>() / n as f64).sqrt();
    if !(s > 0.0) {
        return Err(Error::Degenerate("all pose points coincide".into()));
    }
    let mut a = DMatrix::zeros(3 * n, 12);
    for (i, (x, b)) in points.iter().zip(bearings).enumerate() {
        let xn = (x - mu) / s;
        let h = [xn.x, xn.y, xn.z, 1.0];
        let b = b.as_vec();
        // Rows of [b]x P X = 0, with P in row-major order.
        let sk = [[0.0, -b.z, b.y], [b.z, 0.0, -b.x], [-b.y, b.x, 0.0]];
        for r in 0..3 {
            for row_p in 0..3 {
                let coef = sk[r][row_p];
                if coef == 0.0 {
                    continue;
                }
                for c in 0..4 {
                    a[(3 * i + r, 4 * row_p + c)] += coef * h[c];
                }
            }
        }
    }
    let eig = (a.transpose() * &a).symmetric_eigen();
    let imin = eig.eigenvalues.imin();
    let v = eig.eigenvectors.column(imin);
    let mut p = Matrix3x4::from_fn(|r, c| v[4 * r + c]);
    let mut m: Mat3 = p.fixed_view::<3, 3>(0, 0).into_owned();
    if m.determinant() < 0.0 {
        p = -p;
        m = -m;
    }
    let msvd = m.svd(true, true);
    let (u, vt) = (msvd.u.expect("u"), msvd.v_t.expect("v_t"));
    let kappa = msvd.singular_values.sum() / 3.0;
    if !(kappa > 0.0) {
        return Err(Error::Degenerate(
            "linear pose has a vanishing rotation block".into(),
        ));
    }
    let r = u * vt;
    let rot = Rotation::from_matrix(&r);
    // camera point = s R X' + (R mu + t)
    let t = p.column(3).into_owned() * (s / kappa) - r * mu;
    let c = -(r.transpose() * t);
    Ok(CameraPose::new(rot, c))
}

fn reprojection(k: &Intrinsics, pose: &CameraPose, x: &Vec3, px: &Vec2) -> Option<f64> {
    let xc = pose.to_camera(x);
    if xc.z <= 0.0 {
        return None;
    }
    k.project(&xc).ok().map(|p| (p - px).norm())
}

fn inliers_of(
    k: &Intrinsics,
    pose: &CameraPose,
    points: &[Vec3],
    pixels: &[Vec2],
    threshold: f64,
) -> (Vec<usize>, f64) {
    let mut idx = Vec::new();
    let mut cost = 0.0;
    for (i, (x, px)) in points.iter().zip(pixels).enumerate() {
        match reprojection(k, pose, x, px) {
            Some(e) if e < threshold => {
                idx.push(i);
                cost += e * e;
            }
            _ => cost += threshold * threshold,
        }
    }
    (idx, cost)
}

/// Levenberg-Marquardt on the six pose parameters over the given points.
pub fn refine_pose(
    k: &Intrinsics,
    pose: &CameraPose,
    points: &[Vec3],
    pixels: &[Vec2],
    max_iters: usize,
) -> CameraPose {
    let cost_of = |p: &CameraPose| -> Option<f64> {
        let mut sum = 0.0;
        for (x, px) in points.iter().zip(pixels) {
            let (r, ..) = point_jacobian(k, &p.rotation, &p.position, x, px)?;
            sum += r.norm_squared();
        }
        Some(sum)
    };
    let mut pose = *pose;
    let Some(mut cost) = cost_of(&pose) else {
        return pose;
    };
    let mut lambda = 1e-4;
    for _ in 0..max_iters {
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for (x, px) in points.iter().zip(pixels) {
            let Some((r, jw, jc, _)) = point_jacobian(k, &pose.rotation, &pose.position, x, px)
            else {
                continue;
            };
            let mut j = nalgebra::Matrix2x6::<f64>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&jw);
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&jc);
            h += j.transpose() * j;
            g += j.transpose() * r;
        }
        let mut accepted = false;
        while lambda <= 1e8 {
            let mut hd = h;
            for i in 0..6 {
                hd[(i, i)] += lambda * h[(i, i)].max(1e-12);
            }
            if let Some(ch) = hd.cholesky() {
                let dx = ch.solve(&(-g));
                let cand = CameraPose::new(
                    exp_so3(&Vec3::new(dx[0], dx[1], dx[2])) * pose.rotation,
                    pose.position + Vec3::new(dx[3], dx[4], dx[5]),
                );
                if let Some(c) = cost_of(&cand) {
                    if c < cost {
                        let rel = (cost - c) / cost;
                        pose = cand;
                        cost = c;
                        lambda = (lambda / 10.0).max(1e-12);
                        accepted = rel >= 1e-12;
                        break;
                    }
                }
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    pose
}

/// Robust absolute pose. `prior`, when given, is scored as one extra
/// hypothesis before the random samples.
pub fn solve_pnp(
    k: &Intrinsics,
    points: &[Vec3],
    pixels: &[Vec2],
    prior: Option<&CameraPose>,
    config: &PnpConfig,
) -> Result<PnpResult> {
    let n = points.len();
    let need = config.min_inliers.max(6);
    if n < need || pixels.len() != n {
        return Err(Error::InsufficientSupport {
            what: "pose correspondences",
            have: n.min(pixels.len()),
            need,
        });
    }
    let bearings: Vec<UnitBearing> = pixels.iter().map(|p| k.pixel_to_bearing(p)).collect();
    let mut best: Option<(CameraPose, Vec<usize>, f64)> = None;
    let consider = |pose: CameraPose, best: &mut Option<(CameraPose, Vec<usize>, f64)>| {
        let (idx, cost) = inliers_of(k, &pose, points, pixels, config.threshold_px);
        let better = match best {
            None => true,
            Some((_, bi, bc)) => idx.len() > bi.len() || (idx.len() == bi.len() && cost < *bc),
        };
        if better {
            *best = Some((pose, idx, cost));
        }
    };
    if let Some(p) = prior {
        consider(*p, &mut best);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sp = Vec::with_capacity(6);
    let mut sb = Vec::with_capacity(6);
    for _ in 0..config.iterations {
        sp.clear();
        sb.clear();
        for i in sample(&mut rng, n, 6) {
            sp.push(points[i]);
            sb.push(bearings[i]);
        }
        if let Ok(pose) = dlt_pose(&sp, &sb) {
            consider(pose, &mut best);
        }
    }
    let Some((mut pose, mut inliers, _)) = best else {
        return Err(Error::Degenerate(
            "every pose hypothesis is degenerate".into(),
        ));
    };
    if inliers.len() < need {
        return Err(Error::InsufficientSupport {
            what: "pose inliers",
            have: inliers.len(),
            need,
        });
    }
    for _ in 0..2 {
        let ip: Vec<Vec3> = inliers.iter().map(|&i| points[i]).collect();
        let ix: Vec<Vec2> = inliers.iter().map(|&i| pixels[i]).collect();
        pose = refine_pose(k, &pose, &ip, &ix, 50);
        let (again, _) = inliers_of(k, &pose, points, pixels, config.threshold_px);
        if again.len() < need || again == inliers {
            break;
        }
        inliers = again;
    }
    let sq: f64 = inliers
        .iter()
        .filter_map(|&i| reprojection(k, &pose, &points[i], &pixels[i]))
        .map(|e| e * e)
        .sum();
    Ok(PnpResult {
        pose,
        rms_px: (sq / inliers.len() as f64).sqrt(),
        inliers,
    })
}
