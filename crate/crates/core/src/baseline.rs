//! Two-view triangulation initialization and per-frame PnP tracking: the
//! incremental contrast method for the initialization experiments.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::{CameraPose, Intrinsics, Mat3, Rotation, UnitBearing, Vec2, Vec3};
use crate::pnp::{refine_pose, solve_pnp, PnpConfig};
use crate::rank1::{LocalMap, MapState};
use crate::refine::{augment_partial_tracks, point_jacobian, triangulate_midpoint};
use crate::relmotion::{two_point_translation, BearingPair, RansacConfig};
use crate::tracks::{median_parallax, FrameId, FrameObservations, TrackData};

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineConfig {
    /// Median parallax the first map needs, radians.
    pub parallax_threshold: f64,
    pub ransac: RansacConfig,
    pub pnp: PnpConfig,
    /// Track with the ingested rotation (center-only resection) instead of
    /// full PnP.
    pub track_with_rotation: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            parallax_threshold: 1.15f64.to_radians(),
            ransac: RansacConfig::default(),
            pnp: PnpConfig::default(),
            track_with_rotation: false,
        }
    }
}

/// Two-view map between keyframe `kf` and `frame` once their median parallax
/// exceeds the threshold; `Ok(None)` before that. Rotations are world-to-camera.
/// The second camera sits at unit distance from the keyframe.
pub fn baseline_init(
    kf: (FrameId, &FrameObservations, &Rotation),
    frame: (FrameId, &FrameObservations, &Rotation),
    config: &BaselineConfig,
) -> Result<Option<LocalMap>> {
    let parallax = median_parallax(kf.1, frame.1, kf.2, frame.2)?;
    if parallax <= config.parallax_threshold {
        return Ok(None);
    }
    init_two_view(kf, frame, config).map(Some)
}

fn init_two_view(
    kf: (FrameId, &FrameObservations, &Rotation),
    frame: (FrameId, &FrameObservations, &Rotation),
    config: &BaselineConfig,
) -> Result<LocalMap> {
    let rel = *frame.2 * kf.2.inverse();
    let pairs: Vec<BearingPair> =
        kf.1.iter()
            .filter_map(|(t, o)| {
                frame.1.get(t).map(|f| BearingPair {
                    track: *t,
                    keyframe: o.bearing,
                    frame: f.bearing,
                })
            })
            .collect();
    let motion = two_point_translation(&pairs, &rel, &config.ransac)?;
    let mut map = LocalMap {
        keyframe_id: kf.0,
        frames: vec![kf.0, frame.0],
        rotations: vec![Rotation::identity(), rel],
        positions: vec![Vec3::zeros(), *motion.translation_dir.as_vec()],
        points: BTreeMap::new(),
        state: MapState::TriangulatedAugmented,
    };
    let obs = BTreeMap::from([(kf.0, kf.1.clone()), (frame.0, frame.1.clone())]);
    augment_partial_tracks(&mut map, motion.inlier_ids.iter().copied(), &obs);
    Ok(map)
}

/// Pose of `frame` from map points it observes, relative to the map's
/// keyframe. With a known `rotation` this is resection of the center alone
/// over every observed point. Otherwise full PnP; when its RANSAC finds too
/// little support, pose refinement over every observed point starts from
/// `previous` instead.
pub fn baseline_track(
    map: &LocalMap,
    k: &Intrinsics,
    frame: FrameId,
    obs: &FrameObservations,
    rotation: Option<&Rotation>,
    previous: Option<&CameraPose>,
    config: &BaselineConfig,
) -> Result<CameraPose> {
    let (points, pixels): (Vec<Vec3>, Vec<Vec2>) = map
        .points
        .iter()
        .filter_map(|(t, p)| obs.get(t).map(|o| (p.position(), o.pixel)))
        .unzip();
    if points.len() < 6 {
        return Err(Error::TrackingLost(frame));
    }
    if let Some(rot) = rotation {
        let start = position_from_rotation(map, obs, rot).ok_or(Error::TrackingLost(frame))?;
        return Ok(CameraPose::new(
            *rot,
            refine_position(k, rot, &start, &points, &pixels, 20),
        ));
    }
    match (
        solve_pnp(k, &points, &pixels, previous, &config.pnp),
        previous,
    ) {
        (Ok(r), _) => Ok(r.pose),
        (Err(Error::InsufficientSupport { .. }) | Err(Error::Degenerate(_)), Some(prev)) => {
            Ok(refine_pose(k, prev, &points, &pixels, 50))
        }
        (Err(Error::InsufficientSupport { .. }) | Err(Error::Degenerate(_)), None) => {
            Err(Error::TrackingLost(frame))
        }
        (Err(e), _) => Err(e),
    }
}

/// Camera center with a known rotation: least-squares point closest to the
/// rays from every observed map point back along its bearing.
pub fn position_from_rotation(
    map: &LocalMap,
    obs: &FrameObservations,
    rotation: &Rotation,
) -> Option<Vec3> {
    let rays: Vec<(CameraPose, UnitBearing)> = map
        .points
        .iter()
        .filter_map(|(t, p)| {
            let o = obs.get(t)?;
            let back = UnitBearing::new(-rotation.inverse_rotate(o.bearing.as_vec()))?;
            Some((CameraPose::new(Rotation::identity(), p.position()), back))
        })
        .collect();
    triangulate_midpoint(&rays).ok().map(|(c, _)| c)
}

/// Gauss-Newton on the camera center alone, rotation held fixed, minimizing
/// squared pixel reprojection error.
pub fn refine_position(
    k: &Intrinsics,
    rotation: &Rotation,
    start: &Vec3,
    points: &[Vec3],
    pixels: &[Vec2],
    max_iters: usize,
) -> Vec3 {
    let cost = |c: &Vec3| -> Option<f64> {
        let mut sum = 0.0;
        for (x, px) in points.iter().zip(pixels) {
            sum += point_jacobian(k, rotation, c, x, px)?.0.norm_squared();
        }
        Some(sum)
    };
    let mut c = *start;
    let Some(mut current) = cost(&c) else {
        return c;
    };
    for _ in 0..max_iters {
        let mut h = Mat3::zeros();
        let mut g = Vec3::zeros();
        for (x, px) in points.iter().zip(pixels) {
            if let Some((r, _, jc, _)) = point_jacobian(k, rotation, &c, x, px) {
                h += jc.transpose() * jc;
                g += jc.transpose() * r;
            }
        }
        let Some(step) = h.cholesky().map(|ch| -ch.solve(&g)) else {
            break;
        };
        let next = c + step;
        match cost(&next) {
            Some(v) if v < current => {
                let done = current - v <= 1e-12 * current;
                c = next;
                current = v;
                if done {
                    break;
                }
            }
            _ => break,
        }
    }
    c
}

/// Outcome of running the baseline over a whole clip.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineRun {
    /// Every tracked frame in order, keyframe first, with the initial
    /// two-view points.
    pub map: LocalMap,
    pub init_frame: FrameId,
    /// No frame passed the parallax test; the last one was used anyway.
    pub forced: bool,
}

/// Initializes from the first frame and the earliest frame passing the
/// parallax test, then localizes every other frame against that map with its
/// ingested rotation.
pub fn run_baseline(
    data: &TrackData,
    frames: &[FrameId],
    config: &BaselineConfig,
) -> Result<BaselineRun> {
    if frames.len() < 2 {
        return Err(Error::InvalidInput(
            "the baseline needs at least two frames".into(),
        ));
    }
    let get = |f: FrameId| -> Result<(FrameId, &FrameObservations, &Rotation)> {
        let obs = data
            .frame(f)
            .ok_or_else(|| Error::InvalidInput(format!("no observations for frame {f}")))?;
        let rot = data.rotations.get(&f).ok_or(Error::NoRotationSource)?;
        Ok((f, obs, rot))
    };
    let kf = get(frames[0])?;
    let mut init = None;
    for &f in &frames[1..] {
        if let Some(map) = baseline_init(kf, get(f)?, config)? {
            init = Some((map, f, false));
            break;
        }
    }
    let (map0, init_frame, forced) = match init {
        Some(v) => v,
        None => {
            let last = *frames.last().expect("two frames");
            (init_two_view(kf, get(last)?, config)?, last, true)
        }
    };
    let mut poses = BTreeMap::from([(init_frame, map0.pose(1))]);
    let mut previous = CameraPose::identity();
    for &f in &frames[1..] {
        if f != init_frame {
            let rotation = *get(f)?.2 * kf.2.inverse();
            let known = config.track_with_rotation.then_some(&rotation);
            let pose = baseline_track(
                &map0,
                &data.intrinsics,
                f,
                get(f)?.1,
                known,
                Some(&previous),
                config,
            )?;
            poses.insert(f, pose);
        }
        previous = poses[&f];
    }
    let mut map = map0;
    map.frames = vec![kf.0];
    map.rotations = vec![Rotation::identity()];
    map.positions = vec![Vec3::zeros()];
    for &f in &frames[1..] {
        let pose = poses[&f];
        map.frames.push(f);
        map.rotations.push(pose.rotation);
        map.positions.push(pose.position);
    }
    Ok(BaselineRun {
        map,
        init_frame,
        forced,
    })
}
