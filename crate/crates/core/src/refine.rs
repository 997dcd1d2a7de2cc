//! Local map refinement: midpoint triangulation of partial tracks and a
//! keyframe-anchored bundle adjustment.
//!
//! Points are parameterized by inverse depth along their keyframe bearing, so
//! each point has one unknown and its keyframe reprojection is exact by
//! construction. The normal equations are reduced onto the camera block with
//! a Schur complement (the point block is diagonal).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3x2, Vector2};

use crate::error::{Error, Result};
use crate::geometry::{
    exp_so3, skew, CameraPose, Intrinsics, Mat3, Rotation, UnitBearing, Vec2, Vec3,
};
use crate::rank1::{LocalMap, MapPoint, MapState};
use crate::tracks::{FrameId, FrameObservations, TrackId};

/// Least-squares point closest to every ray, plus whether it lies in front of
/// every camera.
pub fn triangulate_midpoint(observations: &[(CameraPose, UnitBearing)]) -> Result<(Vec3, bool)> {
    if observations.len() < 2 {
        return Err(Error::InsufficientSupport {
            what: "triangulation rays",
            have: observations.len(),
            need: 2,
        });
    }
    let mut a = Mat3::zeros();
    let mut b = Vec3::zeros();
    let dirs: Vec<Vec3> = observations
        .iter()
        .map(|(p, u)| p.ray_direction(u))
        .collect();
    for ((pose, _), d) in observations.iter().zip(&dirs) {
        let proj = Mat3::identity() - d * d.transpose();
        a += proj;
        b += proj * pose.position;
    }
    let parallel = dirs.iter().all(|d| d.cross(&dirs[0]).norm() < 1e-9);
    if parallel {
        return Err(Error::Degenerate(
            "all triangulation rays are parallel".into(),
        ));
    }
    let sv = a.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    if smin <= 0.0 || smax / smin > 1e12 {
        return Err(Error::Degenerate(format!(
            "triangulation normal matrix condition {:e}",
            smax / smin
        )));
    }
    let x = a
        .cholesky()
        .ok_or_else(|| {
            Error::Degenerate("triangulation normal matrix not positive definite".into())
        })?
        .solve(&b);
    let in_front = observations.iter().all(|(p, _)| p.to_camera(&x).z > 0.0);
    Ok((x, in_front))
}

/// Sum of squared ray distances of `x` (the triangulation objective).
pub fn ray_distance_cost(observations: &[(CameraPose, UnitBearing)], x: &Vec3) -> f64 {
    observations
        .iter()
        .map(|(p, u)| {
            let d = p.ray_direction(u);
            let v = x - p.position;
            (v - d * d.dot(&v)).norm_squared()
        })
        .sum()
}

/// Adds partial tracks to `map` by triangulation over the map's frames. A
/// track must be seen in the keyframe (its anchor) and in at least one other
/// member, and must triangulate in front of every camera. Returns the number
/// of points added.
pub fn augment_partial_tracks(
    map: &mut LocalMap,
    tracks: impl IntoIterator<Item = TrackId>,
    frames: &BTreeMap<FrameId, FrameObservations>,
) -> usize {
    let Some(kf_obs) = frames.get(&map.keyframe_id) else {
        return 0;
    };
    let mut added = 0;
    for t in tracks {
        if map.points.contains_key(&t) {
            continue;
        }
        let Some(anchor) = kf_obs.get(&t) else {
            continue;
        };
        let rays: Vec<(CameraPose, UnitBearing)> = map
            .frames
            .iter()
            .enumerate()
            .filter_map(|(i, f)| frames.get(f)?.get(&t).map(|o| (map.pose(i), o.bearing)))
            .collect();
        if rays.len() < 2 {
            continue;
        }
        let Ok((x, true)) = triangulate_midpoint(&rays) else {
            continue;
        };
        let depth = x.dot(anchor.bearing.as_vec());
        if depth <= 0.0 {
            continue;
        }
        map.points.insert(
            t,
            MapPoint {
                bearing: anchor.bearing,
                inv_depth: 1.0 / depth,
            },
        );
        added += 1;
    }
    if added > 0 {
        map.state = MapState::TriangulatedAugmented;
    }
    added
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub lambda_init: f64,
    pub lambda_max: f64,
    /// Points whose RMS reprojection error (pixels) over their observations
    /// exceeds this after convergence are dropped. `None` keeps every point.
    pub outlier_px: Option<f64>,
}

impl Default for BaConfig {
    fn default() -> Self {
        BaConfig {
            max_iters: 100,
            rel_tol: 1e-10,
            lambda_init: 1e-4,
            lambda_max: 1e8,
            outlier_px: Some(5.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaReport {
    pub map: LocalMap,
    pub iters: usize,
    pub initial_cost: f64,
    /// Sum of squared pixel residuals.
    pub cost: f64,
    /// Stopped because damping reached its maximum without an accepted step.
    pub stalled: bool,
    pub dropped_points: Vec<TrackId>,
}

/// Residual and Jacobians of one observation: `(r, dr/d omega, dr/dc, dr/dd)`
/// for the left rotation update `R <- exp(omega) R`.
pub type ObservationJacobian = (Vec2, Matrix2x3<f64>, Matrix2x3<f64>, Vector2<f64>);

/// Reprojection residual `pi(R (x - c)) - pixel` with Jacobians with respect
/// to the rotation update, the camera center and the point. `None` when the
/// point is not in front of the camera.
pub fn point_jacobian(
    k: &Intrinsics,
    rotation: &Rotation,
    position: &Vec3,
    x: &Vec3,
    pixel: &Vec2,
) -> Option<(Vec2, Matrix2x3<f64>, Matrix2x3<f64>, Matrix2x3<f64>)> {
    let r = rotation.matrix();
    let xc = r * (x - position);
    if xc.z <= 0.0 {
        return None;
    }
    let iz = 1.0 / xc.z;
    let proj = Vec2::new(k.fx * xc.x * iz + k.cx, k.fy * xc.y * iz + k.cy);
    let jp = Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * xc.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * xc.y * iz * iz,
    );
    let j_point = jp * r;
    Some((proj - pixel, jp * (-skew(&xc)), -j_point, j_point))
}

/// [`point_jacobian`] for a point `b / d` anchored on a keyframe bearing, with
/// the derivative taken with respect to the inverse depth `d`. Evaluated in
/// homogeneous form `R (b - d c)`, so it stays smooth through `d = 0`.
pub fn observation_jacobian(
    k: &Intrinsics,
    rotation: &Rotation,
    position: &Vec3,
    bearing: &UnitBearing,
    inv_depth: f64,
    pixel: &Vec2,
) -> Option<ObservationJacobian> {
    let b = bearing.as_vec();
    let (r, j_omega, j_shift, _) = point_jacobian(k, rotation, &(position * inv_depth), b, pixel)?;
    Some((r, j_omega, j_shift * inv_depth, j_shift * position))
}

struct BaObs {
    cam: usize,
    point: usize,
    pixel: Vec2,
}

struct Problem<'a> {
    k: &'a Intrinsics,
    bearings: Vec<UnitBearing>,
    obs: Vec<BaObs>,
    /// Parameter offset and dimension per frame (keyframe: dimension 0).
    offsets: Vec<(usize, usize)>,
    n_cam: usize,
    gauge_frame: usize,
    gauge_radius: f64,
}

#[derive(Clone)]
struct State {
    rotations: Vec<Rotation>,
    positions: Vec<Vec3>,
    inv_depths: Vec<f64>,
}

/// Orthonormal basis of the plane perpendicular to `c`.
fn tangent_basis(c: &Vec3) -> Matrix3x2<f64> {
    let n = c.normalize();
    let seed = if n.x.abs() < 0.9 {
        Vec3::x()
    } else {
        Vec3::y()
    };
    let e1 = (seed - n * n.dot(&seed)).normalize();
    let e2 = n.cross(&e1);
    Matrix3x2::from_columns(&[e1, e2])
}

impl Problem<'_> {
    fn cost(&self, s: &State) -> Option<f64> {
        let mut sum = 0.0;
        for o in &self.obs {
            let (r, ..) = observation_jacobian(
                self.k,
                &s.rotations[o.cam],
                &s.positions[o.cam],
                &self.bearings[o.point],
                s.inv_depths[o.point],
                &o.pixel,
            )?;
            sum += r.norm_squared();
        }
        Some(sum)
    }

    /// Normal equations `(A, B, C, g_c, g_d)`, `C` diagonal.
    #[allow(clippy::type_complexity)]
    fn linearize(
        &self,
        s: &State,
    ) -> (DMatrix<f64>, DMatrix<f64>, Vec<f64>, DVector<f64>, Vec<f64>) {
        let np = self.bearings.len();
        let mut a = DMatrix::zeros(self.n_cam, self.n_cam);
        let mut b = DMatrix::zeros(self.n_cam, np);
        let mut c = vec![0.0; np];
        let mut gc = DVector::zeros(self.n_cam);
        let mut gd = vec![0.0; np];
        let basis = tangent_basis(&s.positions[self.gauge_frame]);
        for o in &self.obs {
            let Some((r, jw, jc, jd)) = observation_jacobian(
                self.k,
                &s.rotations[o.cam],
                &s.positions[o.cam],
                &self.bearings[o.point],
                s.inv_depths[o.point],
                &o.pixel,
            ) else {
                continue;
            };
            let (off, dim) = self.offsets[o.cam];
            let mut jcam = DMatrix::<f64>::zeros(2, dim);
            jcam.view_mut((0, 0), (2, 3)).copy_from(&jw);
            if o.cam == self.gauge_frame {
                jcam.view_mut((0, 3), (2, 2)).copy_from(&(jc * basis));
            } else {
                jcam.view_mut((0, 3), (2, 3)).copy_from(&jc);
            }
            let rv = DVector::from_column_slice(r.as_slice());
            let jt = jcam.transpose();
            let mut blk = a.view_mut((off, off), (dim, dim));
            blk += &jt * &jcam;
            let mut g = gc.rows_mut(off, dim);
            g += &jt * &rv;
            let jdv = DVector::from_column_slice(jd.as_slice());
            let mut col = b.view_mut((off, o.point), (dim, 1));
            col += &jt * &jdv;
            c[o.point] += jd.norm_squared();
            gd[o.point] += jd.dot(&r);
        }
        (a, b, c, gc, gd)
    }

    fn apply(&self, s: &State, dx: &DVector<f64>, dd: &[f64]) -> State {
        let mut out = s.clone();
        for (cam, &(off, dim)) in self.offsets.iter().enumerate() {
            if dim == 0 {
                continue;
            }
            let w = Vec3::new(dx[off], dx[off + 1], dx[off + 2]);
            out.rotations[cam] = exp_so3(&w) * s.rotations[cam];
            if cam == self.gauge_frame {
                let u = nalgebra::Vector2::new(dx[off + 3], dx[off + 4]);
                let moved = s.positions[cam] + tangent_basis(&s.positions[cam]) * u;
                out.positions[cam] = moved * (self.gauge_radius / moved.norm());
            } else {
                out.positions[cam] += Vec3::new(dx[off + 3], dx[off + 4], dx[off + 5]);
            }
        }
        // Inverse depth is bounded below by zero (a point at infinity).
        for (d, step) in out.inv_depths.iter_mut().zip(dd) {
            *d = (*d + step).max(0.0);
        }
        out
    }
}

/// Solves the damped system by eliminating the diagonal point block.
#[allow(clippy::too_many_arguments)]
fn solve_damped(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &[f64],
    gc: &DVector<f64>,
    gd: &[f64],
    lambda: f64,
) -> Option<(DVector<f64>, Vec<f64>)> {
    let n = a.nrows();
    let cinv: Vec<f64> = c
        .iter()
        .map(|v| {
            if *v > 0.0 {
                1.0 / (v * (1.0 + lambda))
            } else {
                0.0
            }
        })
        .collect();
    let mut s = a.clone();
    for i in 0..n {
        s[(i, i)] += lambda * a[(i, i)].max(1e-12);
    }
    let mut bw = b.clone();
    for (k, w) in cinv.iter().enumerate() {
        bw.column_mut(k).scale_mut(*w);
    }
    s -= &bw * b.transpose();
    let gdv = DVector::from_column_slice(gd);
    let rhs = -gc + &bw * &gdv;
    let dx = s.cholesky()?.solve(&rhs);
    let btdx = b.transpose() * &dx;
    let dd: Vec<f64> = (0..c.len()).map(|k| -(gd[k] + btdx[k]) * cinv[k]).collect();
    Some((dx, dd))
}

/// Levenberg-Marquardt refinement of the non-keyframe poses and every point's
/// inverse depth. The keyframe pose is fixed, and the first non-keyframe
/// member keeps its distance from the keyframe to pin the scale.
pub fn local_bundle_adjust(
    map: &LocalMap,
    frames: &BTreeMap<FrameId, FrameObservations>,
    k: &Intrinsics,
    config: &BaConfig,
) -> Result<BaReport> {
    if map.frames.len() < 2 {
        return Err(Error::InsufficientSupport {
            what: "frames in the local map",
            have: map.frames.len(),
            need: 2,
        });
    }
    if map.points.len() < 8 {
        return Err(Error::InsufficientSupport {
            what: "points in the local map",
            have: map.points.len(),
            need: 8,
        });
    }
    let gauge_radius = map.positions[1].norm();
    if !(gauge_radius > 0.0) {
        return Err(Error::Degenerate(
            "first frame coincides with the keyframe".into(),
        ));
    }
    let track_ids: Vec<TrackId> = map.points.keys().copied().collect();
    let mut state = State {
        rotations: map.rotations.clone(),
        positions: map.positions.clone(),
        inv_depths: map.points.values().map(|p| p.inv_depth).collect(),
    };
    let mut offsets = vec![(0, 0)];
    let mut n_cam = 0;
    for cam in 1..map.frames.len() {
        let dim = if cam == 1 { 5 } else { 6 };
        offsets.push((n_cam, dim));
        n_cam += dim;
    }
    let mut obs = Vec::new();
    for (cam, f) in map.frames.iter().enumerate().skip(1) {
        let Some(fo) = frames.get(f) else { continue };
        for (p, t) in track_ids.iter().enumerate() {
            if let Some(o) = fo.get(t) {
                // Observations already behind the camera cannot be linearized.
                let xc =
                    state.rotations[cam].rotate(&(map.points[t].position() - state.positions[cam]));
                if xc.z > 0.0 {
                    obs.push(BaObs {
                        cam,
                        point: p,
                        pixel: o.pixel,
                    });
                }
            }
        }
    }
    let problem = Problem {
        k,
        bearings: map.points.values().map(|p| p.bearing).collect(),
        obs,
        offsets,
        n_cam,
        gauge_frame: 1,
        gauge_radius,
    };

    let initial_cost = problem
        .cost(&state)
        .expect("initial observations are in front");
    let mut cost = initial_cost;
    let mut lambda = config.lambda_init;
    let mut iters = 0;
    let mut stalled = false;
    while iters < config.max_iters && cost > 1e-24 {
        let (a, mut b, mut c, gc, mut gd) = problem.linearize(&state);
        // Points held at infinity whose gradient pushes further out stay put.
        for p in 0..c.len() {
            if state.inv_depths[p] <= 0.0 && gd[p] >= 0.0 {
                b.column_mut(p).fill(0.0);
                c[p] = 0.0;
                gd[p] = 0.0;
            }
        }
        // Converged when even the undamped model predicts no real decrease.
        if let Some((dx, dd)) = solve_damped(&a, &b, &c, &gc, &gd, 0.0) {
            let pred = -0.5 * (gc.dot(&dx) + gd.iter().zip(&dd).map(|(g, d)| g * d).sum::<f64>());
            if pred <= config.rel_tol * cost {
                break;
            }
        }
        iters += 1;
        let mut accepted = None;
        while lambda <= config.lambda_max {
            if let Some((dx, dd)) = solve_damped(&a, &b, &c, &gc, &gd, lambda) {
                let cand = problem.apply(&state, &dx, &dd);
                if let Some(new_cost) = problem.cost(&cand) {
                    if new_cost < cost {
                        accepted = Some((cand, new_cost, dx.amax()));
                        lambda = (lambda / 10.0).max(1e-12);
                        break;
                    }
                }
            }
            lambda *= 10.0;
        }
        let Some((cand, new_cost, step)) = accepted else {
            stalled = true;
            break;
        };
        let rel = (cost - new_cost) / cost;
        state = cand;
        cost = new_cost;
        if rel < config.rel_tol || step < 1e-14 {
            break;
        }
    }

    let mut out = map.clone();
    out.rotations = state.rotations;
    out.positions = state.positions;
    for (p, t) in track_ids.iter().enumerate() {
        out.points.get_mut(t).expect("track in map").inv_depth = state.inv_depths[p];
    }
    // Points that converged to or beyond infinity carry no depth.
    let mut dropped: Vec<TrackId> = out
        .points
        .iter()
        .filter(|(_, p)| !(p.inv_depth > 0.0))
        .map(|(t, _)| *t)
        .collect();
    for t in &dropped {
        out.points.remove(t);
    }
    if let Some(limit) = config.outlier_px {
        let mut sums: BTreeMap<TrackId, (f64, usize)> = BTreeMap::new();
        for (cam, f) in out.frames.iter().enumerate() {
            let Some(fo) = frames.get(f) else { continue };
            for (t, pt) in &out.points {
                let Some(o) = fo.get(t) else { continue };
                let xc = out.rotations[cam].rotate(&(pt.position() - out.positions[cam]));
                let sq = match k.project(&xc) {
                    Ok(px) => (px - o.pixel).norm_squared(),
                    Err(_) => f64::INFINITY,
                };
                let e = sums.entry(*t).or_insert((0.0, 0));
                e.0 += sq;
                e.1 += 1;
            }
        }
        for (t, (sq, n)) in sums {
            if !((sq / n as f64).sqrt() <= limit) {
                out.points.remove(&t);
                dropped.push(t);
            }
        }
    }
    dropped.sort_unstable();
    dropped.dedup();
    out.state = MapState::BaRefined;
    Ok(BaReport {
        map: out,
        iters,
        initial_cost,
        cost,
        stalled,
        dropped_points: dropped,
    })
}

/// Sum of squared pixel reprojection errors over every map frame except the
/// keyframe, skipping observations behind a camera.
pub fn reprojection_cost(
    map: &LocalMap,
    frames: &BTreeMap<FrameId, FrameObservations>,
    k: &Intrinsics,
) -> f64 {
    let mut sum = 0.0;
    for (cam, f) in map.frames.iter().enumerate().skip(1) {
        let Some(fo) = frames.get(f) else { continue };
        for (t, p) in &map.points {
            if let Some(o) = fo.get(t) {
                if let Some((r, ..)) = observation_jacobian(
                    k,
                    &map.rotations[cam],
                    &map.positions[cam],
                    &p.bearing,
                    p.inv_depth,
                    &o.pixel,
                ) {
                    sum += r.norm_squared();
                }
            }
        }
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synthesize, DepthRange, Motion, SceneConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut impl Rng) -> Vec3 {
        Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize()
    }

    #[test]
    fn two_rays_meet() {
        let x = Vec3::new(1.0, 2.0, 3.0);
        let a = CameraPose::new(Rotation::identity(), Vec3::zeros());
        let b = CameraPose::new(exp_so3(&Vec3::new(0.0, 0.3, 0.0)), Vec3::new(2.0, 0.0, 0.0));
        let obs = [
            (a, UnitBearing::new(a.to_camera(&x)).unwrap()),
            (b, UnitBearing::new(b.to_camera(&x)).unwrap()),
        ];
        let (p, front) = triangulate_midpoint(&obs).unwrap();
        assert!((p - x).norm() < 1e-10);
        assert!(front);
    }

    #[test]
    fn triangulation_preconditions() {
        let a = CameraPose::identity();
        let u = UnitBearing::new(Vec3::z()).unwrap();
        assert!(triangulate_midpoint(&[(a, u)]).is_err());
        let b = CameraPose::new(Rotation::identity(), Vec3::new(1.0, 0.0, 0.0));
        assert!(matches!(
            triangulate_midpoint(&[(a, u), (b, u)]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn triangulation_flags_behind_camera() {
        let a = CameraPose::identity();
        let b = CameraPose::new(Rotation::identity(), Vec3::new(1.0, 0.0, 0.0));
        let x = Vec3::new(0.5, 0.0, -4.0);
        let obs = [
            (a, UnitBearing::new(a.to_camera(&x)).unwrap()),
            (b, UnitBearing::new(b.to_camera(&x)).unwrap()),
        ];
        let (p, front) = triangulate_midpoint(&obs).unwrap();
        assert!((p - x).norm() < 1e-10);
        assert!(!front);
    }

    #[test]
    fn triangulation_is_locally_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Vec3::new(0.3, -0.2, 6.0);
        let obs: Vec<(CameraPose, UnitBearing)> = (0..4)
            .map(|i| {
                let pose = CameraPose::new(
                    exp_so3(&(random_unit(&mut rng) * 0.05)),
                    Vec3::new(0.3 * i as f64, 0.05, 0.0),
                );
                let noisy = pose.to_camera(&x).normalize() + random_unit(&mut rng) * 3e-3;
                (pose, UnitBearing::new(noisy).unwrap())
            })
            .collect();
        let (p, _) = triangulate_midpoint(&obs).unwrap();
        let best = ray_distance_cost(&obs, &p);
        for _ in 0..1000 {
            let q = p + random_unit(&mut rng) * 1e-3;
            assert!(ray_distance_cost(&obs, &q) >= best);
        }
    }

    #[test]
    fn partial_track_triangulation_is_exact() {
        let cfg = SceneConfig {
            pixel_noise_sigma: 0.0,
            depth: DepthRange::Close,
            motion: Motion::Circular,
            n_frames: 4,
            seed: 3,
            ..Default::default()
        };
        let (gt, data) = synthesize(&cfg).unwrap();
        // Exact keyframe-anchored map at ground-truth scale.
        let kf = gt.poses[0];
        let mut map = LocalMap {
            keyframe_id: 0,
            frames: vec![0, 1, 2, 3],
            rotations: gt
                .poses
                .iter()
                .map(|p| p.rotation * kf.rotation.inverse())
                .collect(),
            positions: gt.poses.iter().map(|p| kf.to_camera(&p.position)).collect(),
            points: BTreeMap::new(),
            state: MapState::Factorized,
        };
        // Drop track 0 from frame 3 to make it partial.
        let mut frames = data.frames.clone();
        frames.get_mut(&3).unwrap().remove(&0);
        assert_eq!(augment_partial_tracks(&mut map, [0], &frames), 1);
        let p = map.points[&0].position();
        assert!((p - kf.to_camera(&gt.points[0])).norm() < 1e-9);
        assert_eq!(map.state, MapState::TriangulatedAugmented);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let k = Intrinsics::from_hfov(60.0, 800, 600).unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let rot = exp_so3(&(random_unit(&mut rng) * rng.random_range(0.0..0.3)));
            let c = random_unit(&mut rng) * rng.random_range(0.0..0.5);
            let b = UnitBearing::new(Vec3::new(
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.3..0.3),
                1.0,
            ))
            .unwrap();
            let d = rng.random_range(0.1..0.5);
            let px = Vec2::new(400.0, 300.0);
            let (_, jw, jc, jd) = observation_jacobian(&k, &rot, &c, &b, d, &px).unwrap();
            let h = 1e-6;
            let f = |r: &Rotation, c: &Vec3, d: f64| {
                observation_jacobian(&k, r, c, &b, d, &px).unwrap().0
            };
            for i in 0..3 {
                let mut e = Vec3::zeros();
                e[i] = h;
                let nw =
                    (f(&(exp_so3(&e) * rot), &c, d) - f(&(exp_so3(&-e) * rot), &c, d)) / (2.0 * h);
                let nc = (f(&rot, &(c + e), d) - f(&rot, &(c - e), d)) / (2.0 * h);
                worst = worst.max((nw - jw.column(i)).norm() / nw.norm().max(1.0));
                worst = worst.max((nc - jc.column(i)).norm() / nc.norm().max(1.0));
            }
            let hd = 1e-7 * d;
            let nd = (f(&rot, &c, d + hd) - f(&rot, &c, d - hd)) / (2.0 * hd);
            worst = worst.max((nd - jd).norm() / nd.norm().max(1.0));
        }
        assert!(worst < 1e-5, "worst {worst}");
    }

    fn exact_map(
        cfg: &SceneConfig,
    ) -> (LocalMap, BTreeMap<FrameId, FrameObservations>, Intrinsics) {
        let (gt, data) = synthesize(cfg).unwrap();
        let kf = gt.poses[0];
        let kobs = &data.frames[&0];
        let n = cfg.n_frames;
        let points = gt
            .points
            .iter()
            .enumerate()
            .filter(|(t, _)| (0..n).all(|f| data.frames[&f].contains_key(t)))
            .map(|(t, x)| {
                let xc = kf.to_camera(x);
                let b = kobs[&t].bearing;
                (
                    t,
                    MapPoint {
                        bearing: b,
                        inv_depth: 1.0 / xc.dot(b.as_vec()),
                    },
                )
            })
            .collect();
        let map = LocalMap {
            keyframe_id: 0,
            frames: (0..n).collect(),
            rotations: gt
                .poses
                .iter()
                .map(|p| p.rotation * kf.rotation.inverse())
                .collect(),
            positions: gt.poses.iter().map(|p| kf.to_camera(&p.position)).collect(),
            points,
            state: MapState::Factorized,
        };
        (map, data.frames, data.intrinsics)
    }

    #[test]
    fn optimum_converges_immediately() {
        let cfg = SceneConfig {
            pixel_noise_sigma: 0.0,
            n_frames: 6,
            seed: 4,
            ..Default::default()
        };
        let (map, frames, k) = exact_map(&cfg);
        let r = local_bundle_adjust(&map, &frames, &k, &BaConfig::default()).unwrap();
        assert!(r.iters <= 1, "iters {}", r.iters);
        assert!(r.cost < 1e-18, "cost {}", r.cost);
        assert_eq!(r.map.state, MapState::BaRefined);
    }

    fn perturbed(map: &LocalMap, seed: u64) -> LocalMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = map.clone();
        for i in 2..m.frames.len() {
            m.positions[i] += random_unit(&mut rng) * 0.005;
            m.rotations[i] = exp_so3(&(random_unit(&mut rng) * 0.002)) * m.rotations[i];
        }
        for p in m.points.values_mut() {
            p.inv_depth *= 1.0 + rng.random_range(-0.05..0.05);
        }
        m
    }

    #[test]
    fn noisy_map_cost_decreases() {
        let cfg = SceneConfig {
            n_frames: 8,
            depth: DepthRange::Close,
            seed: 5,
            ..Default::default()
        };
        let (map, frames, k) = exact_map(&cfg);
        let start = perturbed(&map, 1);
        let r = local_bundle_adjust(
            &start,
            &frames,
            &k,
            &BaConfig {
                outlier_px: None,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(r.cost < r.initial_cost);
        assert!(!r.stalled);
        // Gauge: keyframe untouched, first frame distance preserved.
        assert_eq!(r.map.positions[0], Vec3::zeros());
        assert!((r.map.positions[1].norm() - start.positions[1].norm()).abs() < 1e-12);
        // Refinement beats the true structure on noisy pixels.
        assert!(r.cost < reprojection_cost(&map, &frames, &k));
        // Points that ended at infinity are dropped with their residuals.
        assert!(r.map.points.values().all(|p| p.inv_depth > 0.0));
        assert_eq!(
            r.map.points.len() + r.dropped_points.len(),
            start.points.len()
        );
        assert!(reprojection_cost(&r.map, &frames, &k) <= r.cost * (1.0 + 1e-9));
    }

    #[test]
    fn scale_gauge_invariance() {
        let cfg = SceneConfig {
            n_frames: 6,
            motion: Motion::Circular,
            depth: DepthRange::Close,
            seed: 6,
            ..Default::default()
        };
        let (map, frames, k) = exact_map(&cfg);
        let a = perturbed(&map, 2);
        let mut b = a.clone();
        let s = 3.5;
        b.positions.iter_mut().for_each(|c| *c *= s);
        b.points.values_mut().for_each(|p| p.inv_depth /= s);
        let cfg = BaConfig {
            outlier_px: None,
            ..Default::default()
        };
        let ra = local_bundle_adjust(&a, &frames, &k, &cfg).unwrap();
        let rb = local_bundle_adjust(&b, &frames, &k, &cfg).unwrap();
        assert!(
            (ra.cost - rb.cost).abs() < 1e-9 * ra.cost.max(1.0),
            "{} {}",
            ra.cost,
            rb.cost
        );
    }

    #[test]
    fn points_beyond_outlier_limit_are_dropped() {
        let cfg = SceneConfig {
            n_frames: 5,
            depth: DepthRange::Close,
            seed: 7,
            ..Default::default()
        };
        let (map, frames, k) = exact_map(&cfg);
        let limit = 4.0;
        let r = local_bundle_adjust(
            &map,
            &frames,
            &k,
            &BaConfig {
                outlier_px: Some(limit),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(!r.dropped_points.is_empty());
        assert_eq!(
            r.map.points.len() + r.dropped_points.len(),
            map.points.len()
        );
        for (t, p) in &r.map.points {
            let sq: Vec<f64> = r
                .map
                .frames
                .iter()
                .enumerate()
                .filter_map(|(cam, f)| {
                    let o = frames[f].get(t)?;
                    let xc = r.map.rotations[cam].rotate(&(p.position() - r.map.positions[cam]));
                    Some((k.project(&xc).unwrap() - o.pixel).norm_squared())
                })
                .collect();
            assert!((sq.iter().sum::<f64>() / sq.len() as f64).sqrt() <= limit);
        }
    }

    #[test]
    fn preconditions() {
        let cfg = SceneConfig {
            pixel_noise_sigma: 0.0,
            n_frames: 3,
            ..Default::default()
        };
        let (map, frames, k) = exact_map(&cfg);
        let mut one = map.clone();
        one.frames.truncate(1);
        assert!(local_bundle_adjust(&one, &frames, &k, &BaConfig::default()).is_err());
        let mut few = map.clone();
        let keep: Vec<TrackId> = few.points.keys().take(5).copied().collect();
        few.points.retain(|t, _| keep.contains(t));
        assert!(local_bundle_adjust(&few, &frames, &k, &BaConfig::default()).is_err());
    }
}
