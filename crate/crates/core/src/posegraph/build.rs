//! Edge construction from local maps.

use std::collections::BTreeMap;

use super::{EdgeKind, Sim3Edge};
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Vec2, Vec3};
use crate::pnp::{solve_pnp, PnpConfig};
use crate::rank1::{LocalMap, MapState};
use crate::refine::{local_bundle_adjust, BaConfig};
use crate::tracks::{median, FrameObservations};

/// Median ratio of point distances from a common camera center, map `j`
/// over map `i`. Under `X_w = s R^T X + c` this is `s_i / s_j`.
pub fn relative_scale(shared: &[(Vec3, Vec3)], center_i: &Vec3, center_j: &Vec3) -> Result<f64> {
    let mut ratios: Vec<f64> = shared
        .iter()
        .filter_map(|(pi, pj)| {
            let di = (pi - center_i).norm();
            (di > 0.0).then(|| (pj - center_j).norm() / di)
        })
        .filter(|r| r.is_finite() && *r > 0.0)
        .collect();
    if ratios.is_empty() {
        return Err(Error::InsufficientSupport {
            what: "shared points off the reference center",
            have: 0,
            need: 1,
        });
    }
    Ok(median(&mut ratios))
}

/// Points of `map` seen in both maps, paired by track id.
fn shared_points(a: &LocalMap, b: &LocalMap) -> Vec<(Vec3, Vec3)> {
    a.points
        .iter()
        .filter_map(|(t, p)| b.points.get(t).map(|q| (p.position(), q.position())))
        .collect()
}

/// Edge from keyframe `map_i.keyframe_id` to the next keyframe
/// `map_j.keyframe_id`, which must be a member of `map_i`. The scale uses the
/// next keyframe's center, known in both maps.
pub fn direct_edge(map_i: &LocalMap, map_j: &LocalMap) -> Result<Sim3Edge> {
    let idx = map_i.frame_index(map_j.keyframe_id).ok_or_else(|| {
        Error::InvalidInput(format!(
            "keyframe {} is not a member of the local map of keyframe {}",
            map_j.keyframe_id, map_i.keyframe_id
        ))
    })?;
    let c = map_i.positions[idx];
    let s = relative_scale(&shared_points(map_i, map_j), &c, &Vec3::zeros())?;
    Sim3Edge::new(
        map_i.keyframe_id,
        map_j.keyframe_id,
        s,
        map_i.rotations[idx],
        c,
        EdgeKind::Direct,
    )
}

/// Default minimum number of shared tracks an extended edge needs, exclusive.
pub const EXTENDED_MIN_SHARED: usize = 50;

/// Chains `j -> i` and `i -> next` into `j -> next` when the two endpoints
/// share more than `min_shared` tracks.
pub fn extended_edge(
    e_ji: &Sim3Edge,
    e_inext: &Sim3Edge,
    shared_tracks: usize,
    min_shared: usize,
) -> Result<Option<Sim3Edge>> {
    if e_ji.to != e_inext.from {
        return Err(Error::InvalidInput(format!(
            "edges {}->{} and {}->{} do not chain",
            e_ji.from, e_ji.to, e_inext.from, e_inext.to
        )));
    }
    if shared_tracks <= min_shared {
        return Ok(None);
    }
    let t = e_ji.transform().compose(&e_inext.transform());
    Sim3Edge::from_transform(e_ji.from, e_inext.to, &t, EdgeKind::Extended).map(Some)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopConfig {
    /// Shared tracks with a 3D point in the older map.
    pub min_shared: usize,
    pub pnp: PnpConfig,
    pub ba: BaConfig,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            min_shared: 12,
            pnp: PnpConfig::default(),
            ba: BaConfig::default(),
        }
    }
}

/// Loop edge from `map_i`'s keyframe to `map_j`'s keyframe, whose
/// observations are `obs_j`. The pose comes from PnP on map-`i` points and is
/// refined by a two-camera bundle adjustment. `Ok(None)` when the candidate
/// lacks support.
pub fn loop_edge(
    map_i: &LocalMap,
    map_j: &LocalMap,
    obs_j: &FrameObservations,
    k: &Intrinsics,
    config: &LoopConfig,
) -> Result<Option<Sim3Edge>> {
    let ids: Vec<_> = map_i
        .points
        .keys()
        .filter(|t| obs_j.contains_key(t))
        .copied()
        .collect();
    if ids.len() < config.min_shared {
        return Ok(None);
    }
    let points: Vec<Vec3> = ids.iter().map(|t| map_i.points[t].position()).collect();
    let pixels: Vec<Vec2> = ids.iter().map(|t| obs_j[t].pixel).collect();
    let pnp = match solve_pnp(k, &points, &pixels, None, &config.pnp) {
        Ok(r) => r,
        Err(Error::InsufficientSupport { .. }) | Err(Error::Degenerate(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let inliers: Vec<_> = pnp.inliers.iter().map(|&i| ids[i]).collect();
    let pair = LocalMap {
        keyframe_id: map_i.keyframe_id,
        frames: vec![map_i.keyframe_id, map_j.keyframe_id],
        rotations: vec![Default::default(), pnp.pose.rotation],
        positions: vec![Vec3::zeros(), pnp.pose.position],
        points: inliers.iter().map(|t| (*t, map_i.points[t])).collect(),
        state: MapState::BaRefined,
    };
    let refined = if pair.points.len() >= 8 && pair.positions[1].norm() > 0.0 {
        let frames = BTreeMap::from([(map_j.keyframe_id, obs_j.clone())]);
        local_bundle_adjust(&pair, &frames, k, &config.ba)?.map
    } else {
        pair
    };
    let c = refined.positions[1];
    let Ok(s) = relative_scale(&shared_points(&refined, map_j), &c, &Vec3::zeros()) else {
        return Ok(None);
    };
    Sim3Edge::new(
        map_i.keyframe_id,
        map_j.keyframe_id,
        s,
        refined.rotations[1],
        c,
        EdgeKind::Loop,
    )
    .map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{exp_so3, CameraPose, Rotation, UnitBearing};
    use crate::posegraph::GlobalPose;
    use crate::rank1::MapPoint;
    use crate::tracks::Observation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn world_points(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(6.0..12.0),
                )
            })
            .collect()
    }

    /// Map of a keyframe at global pose `g` whose members sit at world poses
    /// `members` (keyframe first), with points expressed in its own units.
    fn local_map(
        kf: usize,
        g: &GlobalPose,
        members: &[(usize, CameraPose)],
        pts: &[Vec3],
    ) -> LocalMap {
        let to_local = g.to_world().inverse();
        let mut points = BTreeMap::new();
        for (t, x) in pts.iter().enumerate() {
            let xl = to_local.apply(x);
            if xl.z > 0.0 {
                points.insert(
                    t,
                    MapPoint {
                        bearing: UnitBearing::new(xl).unwrap(),
                        inv_depth: 1.0 / xl.norm(),
                    },
                );
            }
        }
        LocalMap {
            keyframe_id: kf,
            frames: members.iter().map(|m| m.0).collect(),
            rotations: members
                .iter()
                .map(|(_, p)| p.rotation * g.rotation.inverse())
                .collect(),
            positions: members
                .iter()
                .map(|(_, p)| to_local.apply(&p.position))
                .collect(),
            points,
            state: MapState::BaRefined,
        }
    }

    fn global(cam: &CameraPose, s: f64) -> GlobalPose {
        GlobalPose {
            scale: s,
            rotation: cam.rotation,
            position: cam.position,
        }
    }

    #[test]
    fn relative_scale_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = world_points(100, 4);
        let same: Vec<_> = pts.iter().map(|p| (*p, *p)).collect();
        assert_eq!(
            relative_scale(&same, &Vec3::zeros(), &Vec3::zeros()).unwrap(),
            1.0
        );
        let doubled: Vec<_> = pts.iter().map(|p| (*p, p * 2.0)).collect();
        assert!(
            (relative_scale(&doubled, &Vec3::zeros(), &Vec3::zeros()).unwrap() - 2.0).abs() < 1e-12
        );
        let mut corrupted = doubled.clone();
        for pair in corrupted.iter_mut().take(40) {
            pair.1 *= rng.random_range(0.1..10.0);
        }
        let s = relative_scale(&corrupted, &Vec3::zeros(), &Vec3::zeros()).unwrap();
        assert!((s - 2.0).abs() < 0.02, "{s}");
        let at_center = [(Vec3::zeros(), Vec3::x())];
        assert!(relative_scale(&at_center, &Vec3::zeros(), &Vec3::zeros()).is_err());
    }

    #[test]
    fn direct_edge_matches_global_convention() {
        let pts = world_points(80, 5);
        let cam = |x: f64, a: f64| {
            CameraPose::new(exp_so3(&Vec3::new(0.0, a, 0.0)), Vec3::new(x, 0.0, 0.0))
        };
        let (c0, c1, c2) = (cam(0.0, 0.0), cam(0.5, 0.05), cam(1.0, 0.1));
        let (g0, g1, g2) = (global(&c0, 1.0), global(&c1, 0.4), global(&c2, 2.5));
        let m0 = local_map(0, &g0, &[(0, c0), (1, c1)], &pts);
        let m1 = local_map(1, &g1, &[(1, c1), (2, c2)], &pts);
        let m2 = local_map(2, &g2, &[(2, c2)], &pts);
        let e01 = direct_edge(&m0, &m1).unwrap();
        let truth = Sim3Edge::between((0, &g0), (1, &g1), EdgeKind::Direct).unwrap();
        assert!((e01.scale - truth.scale).abs() < 1e-9);
        assert!(e01.rotation.angle_to(&truth.rotation) < 1e-12);
        assert!((e01.position - truth.position).norm() < 1e-12);
        assert!(direct_edge(&m0, &m2).is_err());

        let e12 = direct_edge(&m1, &m2).unwrap();
        assert!(extended_edge(&e01, &e12, 50, EXTENDED_MIN_SHARED)
            .unwrap()
            .is_none());
        let e02 = extended_edge(&e01, &e12, 51, EXTENDED_MIN_SHARED)
            .unwrap()
            .unwrap();
        let composed = e01.transform().compose(&e12.transform());
        assert_eq!((e02.from, e02.to, e02.kind), (0, 2, EdgeKind::Extended));
        assert!((e02.transform().scale - composed.scale).abs() < 1e-9);
        assert!((e02.position - composed.translation).norm() < 1e-9);
        let truth02 = Sim3Edge::between((0, &g0), (2, &g2), EdgeKind::Extended).unwrap();
        assert!((e02.scale - truth02.scale).abs() < 1e-9);
        assert!(extended_edge(&e12, &e01, 60, EXTENDED_MIN_SHARED).is_err());
    }

    fn observations(k: &Intrinsics, cam: &CameraPose, pts: &[Vec3]) -> FrameObservations {
        pts.iter()
            .enumerate()
            .filter_map(|(t, x)| {
                cam.project(k, x)
                    .ok()
                    .filter(|p| k.contains(p))
                    .map(|p| (t, Observation::new(k, p)))
            })
            .collect()
    }

    #[test]
    fn loop_edge_exact_revisit() {
        let k = Intrinsics::from_hfov(60.0, 640, 480).unwrap();
        let pts = world_points(60, 6);
        let ci = CameraPose::new(Rotation::identity(), Vec3::zeros());
        let cj = CameraPose::new(
            exp_so3(&Vec3::new(0.02, -0.1, 0.03)),
            Vec3::new(0.8, 0.1, -0.3),
        );
        let (gi, gj) = (global(&ci, 1.0), global(&cj, 0.6));
        let mi = local_map(3, &gi, &[(3, ci)], &pts);
        let mj = local_map(40, &gj, &[(40, cj)], &pts);
        let obs_j = observations(&k, &cj, &pts);
        let e = loop_edge(&mi, &mj, &obs_j, &k, &LoopConfig::default())
            .unwrap()
            .unwrap();
        let truth = Sim3Edge::between((3, &gi), (40, &gj), EdgeKind::Loop).unwrap();
        assert_eq!(e.kind, EdgeKind::Loop);
        assert!(e.rotation.angle_to(&truth.rotation) < 1e-8);
        assert!((e.position - truth.position).norm() < 1e-8);
        assert!((e.scale - truth.scale).abs() < 1e-8);

        let few: FrameObservations = obs_j.into_iter().take(5).collect();
        assert!(loop_edge(&mi, &mj, &few, &k, &LoopConfig::default())
            .unwrap()
            .is_none());
    }
}
