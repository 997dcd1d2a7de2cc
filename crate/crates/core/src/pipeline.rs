//! End-to-end monocular SLAM over a track file: keyframe windows, rank-1
//! odometry, local refinement and an incrementally solved pose graph.
//!
//! Trajectory files hold one record per frame:
//!
//! ```text
//! traj <frame_id> <qw> <qx> <qy> <qz> <cx> <cy> <cz>
//! ```
//!
//! with world-to-camera rotations and camera centers in world coordinates.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::TrajectoryMetrics;
use crate::geometry::{CameraPose, Rotation, Vec3};
use crate::posegraph::{
    direct_edge, extended_edge, incremental_update, loop_edge, solve_robust, EdgeKind, GlobalPoses,
    LoopConfig, OutlierThresholds, PoseGraph, SolveConfig, EXTENDED_MIN_SHARED,
};
use crate::rank1::{LocalMap, OdometryConfig, WindowOdometry};
use crate::refine::{augment_partial_tracks, local_bundle_adjust, BaConfig};
use crate::synth::{perturb_rotations, GroundTruth};
use crate::tracks::{update_window, FrameId, LocalWindow, TrackData, WindowConfig, WindowDecision};

#[derive(Clone, Debug, PartialEq)]
pub struct SlamConfig {
    pub window: WindowConfig,
    pub odometry: OdometryConfig,
    pub ba: BaConfig,
    pub loops: LoopConfig,
    /// Extended edges need more than this many tracks shared by their ends.
    pub extended_min_shared: usize,
    /// Loop candidates must be more than this many keyframes apart.
    pub loop_min_separation: usize,
    /// Loop candidates must share more than this many track ids.
    pub loop_min_shared_tracks: usize,
    pub solve: SolveConfig,
    pub outliers: OutlierThresholds,
}

impl Default for SlamConfig {
    fn default() -> Self {
        SlamConfig {
            window: WindowConfig::default(),
            odometry: OdometryConfig {
                accept_unconverged: true,
                ..OdometryConfig::default()
            },
            ba: BaConfig::default(),
            loops: LoopConfig::default(),
            extended_min_shared: EXTENDED_MIN_SHARED,
            loop_min_separation: 3,
            loop_min_shared_tracks: 30,
            solve: SolveConfig::default(),
            outliers: OutlierThresholds::default(),
        }
    }
}

/// Per-keyframe bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KeyframeReport {
    pub keyframe: FrameId,
    pub frames: usize,
    pub points: usize,
    pub augmented: usize,
    pub ba_iters: usize,
    pub ba_initial_cost: f64,
    pub ba_cost: f64,
    pub graph_inner_iters: usize,
}

#[derive(Clone, Debug)]
pub struct SlamOutput {
    /// World pose of every tracked frame.
    pub trajectory: BTreeMap<FrameId, CameraPose>,
    pub keyframes: Vec<FrameId>,
    pub maps: Vec<LocalMap>,
    pub graph: PoseGraph,
    pub solution: GlobalPoses,
    /// Edge indices flagged by the final robust solve.
    pub flagged_edges: Vec<usize>,
    /// Factorization iterations of every odometry step, replays included.
    pub odometry_iters: Vec<usize>,
    pub reports: Vec<KeyframeReport>,
}

/// Rotations for every frame: the file's `rot` records, or, when
/// `noise_deg` is given, the `gt` rotations perturbed with that noise.
pub fn rotation_source(
    data: &TrackData,
    noise_deg: Option<f64>,
    seed: u64,
) -> Result<BTreeMap<FrameId, Rotation>> {
    let frames: Vec<FrameId> = data.frames.keys().copied().collect();
    match noise_deg {
        Some(noise) => {
            if !frames.iter().all(|f| data.ground_truth.contains_key(f)) {
                return Err(Error::NoRotationSource);
            }
            let gt = GroundTruth {
                poses: frames.iter().map(|f| data.ground_truth[f]).collect(),
                points: vec![],
                normals: None,
            };
            let rots = perturb_rotations(&gt, noise, seed)?;
            Ok(frames.into_iter().zip(rots).collect())
        }
        None => {
            if data.rotations.is_empty() {
                return Err(Error::NoRotationSource);
            }
            if let Some(f) = frames.iter().find(|f| !data.rotations.contains_key(f)) {
                return Err(Error::InvalidInput(format!(
                    "no `rot` record for frame {f}"
                )));
            }
            Ok(data.rotations.clone())
        }
    }
}

struct Mapper<'a> {
    data: &'a TrackData,
    rotations: &'a BTreeMap<FrameId, Rotation>,
    config: &'a SlamConfig,
    maps: Vec<LocalMap>,
    graph: PoseGraph,
    solution: Option<GlobalPoses>,
    odometry_iters: Vec<usize>,
    reports: Vec<KeyframeReport>,
}

impl Mapper<'_> {
    fn step(&mut self, odo: &mut WindowOdometry, frame: FrameId) -> Result<()> {
        let report = odo.step(
            frame,
            &self.data.frames[&frame],
            &self.relative_rotation(odo.keyframe_id(), frame),
            &self.config.odometry,
        )?;
        self.odometry_iters.push(report.iters);
        Ok(())
    }

    /// Rotation of `frame` relative to `keyframe`, world-to-camera.
    fn relative_rotation(&self, keyframe: FrameId, frame: FrameId) -> Rotation {
        self.rotations[&frame] * self.rotations[&keyframe].inverse()
    }

    /// Fresh odometry for `window`, replaying its members.
    fn replay(&mut self, window: &LocalWindow) -> Result<WindowOdometry> {
        let kf = window.keyframe_id;
        let mut odo = WindowOdometry::new(kf, self.data.frames[&kf].clone());
        for &f in &window.member_frames[1..] {
            self.step(&mut odo, f)?;
        }
        Ok(odo)
    }

    /// Refines the closed window's map and adds its keyframe to the graph.
    fn finish(&mut self, odo: &WindowOdometry, window: &LocalWindow) -> Result<()> {
        let mut map = odo.local_map();
        let augmented = augment_partial_tracks(
            &mut map,
            window.tracks_partial.iter().copied(),
            &self.data.frames,
        );
        let mut report = KeyframeReport {
            keyframe: map.keyframe_id,
            frames: map.frames.len(),
            points: map.points.len(),
            augmented,
            ba_iters: 0,
            ba_initial_cost: 0.0,
            ba_cost: 0.0,
            graph_inner_iters: 0,
        };
        match local_bundle_adjust(
            &map,
            &self.data.frames,
            &self.data.intrinsics,
            &self.config.ba,
        ) {
            Ok(ba) => {
                report.ba_iters = ba.iters;
                report.ba_initial_cost = ba.initial_cost;
                report.ba_cost = ba.cost;
                map = ba.map;
                report.points = map.points.len();
            }
            Err(Error::InsufficientSupport { .. }) => {}
            Err(e) => return Err(e),
        }
        report.graph_inner_iters = self.add_keyframe(map)?;
        self.reports.push(report);
        Ok(())
    }

    fn shared_tracks(&self, a: FrameId, b: FrameId) -> usize {
        let (fa, fb) = (&self.data.frames[&a], &self.data.frames[&b]);
        fa.keys().filter(|t| fb.contains_key(t)).count()
    }

    /// Direct, extended and loop edges into the new keyframe, then an
    /// incremental solve. Returns the solver's inner iterations.
    fn add_keyframe(&mut self, map: LocalMap) -> Result<usize> {
        let kf = map.keyframe_id;
        let j = self.maps.len();
        self.graph.add_keyframe(kf);
        if j > 0 {
            let prev = &self.maps[j - 1];
            let direct = direct_edge(prev, &map)?;
            if j > 1 {
                let before = self.maps[j - 2].keyframe_id;
                if let Some(e_prev) = self.graph.edge(before, prev.keyframe_id) {
                    if let Some(e) = extended_edge(
                        e_prev,
                        &direct,
                        self.shared_tracks(before, kf),
                        self.config.extended_min_shared,
                    )? {
                        self.graph.add_edge(e);
                    }
                }
            }
            self.graph.add_edge(direct);
            let obs = &self.data.frames[&kf];
            for m in 0..j {
                let older = &self.maps[m];
                if j - m <= self.config.loop_min_separation
                    || self.shared_tracks(older.keyframe_id, kf)
                        <= self.config.loop_min_shared_tracks
                {
                    continue;
                }
                if let Some(e) =
                    loop_edge(older, &map, obs, &self.data.intrinsics, &self.config.loops)?
                {
                    self.graph.add_edge(e);
                }
            }
        }
        self.maps.push(map);
        let prev = self.solution.take().unwrap_or(GlobalPoses {
            gauge: kf,
            poses: BTreeMap::new(),
        });
        let (sol, stats) = incremental_update(&self.graph, kf, &prev, &self.config.solve)?;
        self.solution = Some(sol);
        Ok(stats.total_inner())
    }
}

/// Runs the whole pipeline over `data` with per-frame world-to-camera
/// `rotations`.
pub fn run_slam(
    data: &TrackData,
    rotations: &BTreeMap<FrameId, Rotation>,
    config: &SlamConfig,
) -> Result<SlamOutput> {
    let frames: Vec<FrameId> = data.frames.keys().copied().collect();
    if frames.len() < 2 {
        return Err(Error::InsufficientSupport {
            what: "frames",
            have: frames.len(),
            need: 2,
        });
    }
    if let Some(f) = frames.iter().find(|f| !rotations.contains_key(f)) {
        return Err(Error::InvalidInput(format!("no rotation for frame {f}")));
    }
    let mut mapper = Mapper {
        data,
        rotations,
        config,
        maps: vec![],
        graph: PoseGraph::new(),
        solution: None,
        odometry_iters: vec![],
        reports: vec![],
    };

    let first = frames[0];
    let mut window = LocalWindow::new(first, &data.frames[&first]);
    let mut odo = WindowOdometry::new(first, data.frames[&first].clone());
    for &f in &frames[1..] {
        let before_last = window.last_frame();
        let split = match update_window(
            &mut window,
            f,
            &data.frames[&f],
            data,
            rotations,
            &config.window,
        )? {
            WindowDecision::Expand => match mapper.step(&mut odo, f) {
                Ok(()) => None,
                // The frame passed the overlap test but the factorization
                // lost support: close at the previous member instead.
                Err(e) if e.is_numerical() => Some(before_last),
                Err(e) => return Err(e),
            },
            WindowDecision::CloseAndStartNew { keyframe, .. } => Some(keyframe),
        };
        let Some(keyframe) = split else { continue };
        if keyframe == window.keyframe_id || keyframe == f {
            return Err(Error::TrackingLost(f));
        }
        let (old, new) = window.close_at(keyframe, f, data);
        odo.truncate_after(keyframe, &config.odometry)?;
        mapper.finish(&odo, &old)?;
        odo = mapper.replay(&new)?;
        window = new;
    }
    if !odo.frames().is_empty() {
        mapper.finish(&odo, &window)?;
    }

    let mut graph = mapper.graph;
    let solution = mapper.solution.ok_or(Error::TrackingLost(first))?;
    let (solution, _, flagged_edges) =
        solve_robust(&mut graph, Some(&solution), &config.outliers, &config.solve)?;
    let trajectory = world_trajectory(&mapper.maps, &solution);
    Ok(SlamOutput {
        trajectory,
        keyframes: mapper.maps.iter().map(|m| m.keyframe_id).collect(),
        maps: mapper.maps,
        graph,
        solution,
        flagged_edges,
        odometry_iters: mapper.odometry_iters,
        reports: mapper.reports,
    })
}

/// Keyframes take their graph pose; other frames are mapped through their
/// own window's keyframe.
fn world_trajectory(maps: &[LocalMap], solution: &GlobalPoses) -> BTreeMap<FrameId, CameraPose> {
    let mut out = BTreeMap::new();
    for m in maps {
        if let Some(g) = solution.poses.get(&m.keyframe_id) {
            out.insert(m.keyframe_id, CameraPose::new(g.rotation, g.position));
        }
    }
    for m in maps {
        let Some(g) = solution.poses.get(&m.keyframe_id) else {
            continue;
        };
        let to_world = g.to_world();
        for (i, f) in m.frames.iter().enumerate().skip(1) {
            out.entry(*f).or_insert_with(|| {
                CameraPose::new(m.rotations[i] * g.rotation, to_world.apply(&m.positions[i]))
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlamMetrics {
    /// `None` with fewer than two keyframes.
    pub keyframes: Option<TrajectoryMetrics>,
    pub frames: TrajectoryMetrics,
    pub edges_direct: usize,
    pub edges_extended: usize,
    pub edges_loop: usize,
    pub flagged_edges: usize,
    pub odometry_iters_mean: f64,
    pub odometry_iters_max: usize,
    pub ba_iters_mean: f64,
    pub ba_iters_max: usize,
}

impl SlamMetrics {
    /// Metrics against the `gt` records, or `None` when they are missing.
    pub fn compute(out: &SlamOutput, data: &TrackData) -> Option<Result<Self>> {
        if data.ground_truth.is_empty() {
            return None;
        }
        Some(Self::compute_inner(out, data))
    }

    fn compute_inner(out: &SlamOutput, data: &TrackData) -> Result<Self> {
        let pairs = |ids: &mut dyn Iterator<Item = FrameId>| -> (Vec<Vec3>, Vec<Vec3>) {
            ids.filter_map(|f| {
                Some((
                    out.trajectory.get(&f)?.position,
                    data.ground_truth.get(&f)?.position,
                ))
            })
            .unzip()
        };
        let (ke, kg) = pairs(&mut out.keyframes.iter().copied());
        let (fe, fg) = pairs(&mut out.trajectory.keys().copied());
        let count = |k: EdgeKind| out.graph.edges.iter().filter(|e| e.kind == k).count();
        let mean = |v: &[usize]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<usize>() as f64 / v.len() as f64
            }
        };
        let ba: Vec<usize> = out.reports.iter().map(|r| r.ba_iters).collect();
        Ok(SlamMetrics {
            keyframes: if ke.len() >= 2 {
                Some(TrajectoryMetrics::compute(&ke, &kg)?)
            } else {
                None
            },
            frames: TrajectoryMetrics::compute(&fe, &fg)?,
            edges_direct: count(EdgeKind::Direct),
            edges_extended: count(EdgeKind::Extended),
            edges_loop: count(EdgeKind::Loop),
            flagged_edges: out.flagged_edges.len(),
            odometry_iters_mean: mean(&out.odometry_iters),
            odometry_iters_max: out.odometry_iters.iter().copied().max().unwrap_or(0),
            ba_iters_mean: mean(&ba),
            ba_iters_max: ba.iter().copied().max().unwrap_or(0),
        })
    }

    /// `key value` lines.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        for (prefix, m) in [
            ("keyframe", self.keyframes.as_ref()),
            ("frame", Some(&self.frames)),
        ] {
            let Some(m) = m else { continue };
            for line in m.to_key_value().lines() {
                s.push_str(&format!("{prefix}_{line}\n"));
            }
        }
        s.push_str(&format!(
            "edges_direct {}\nedges_extended {}\nedges_loop {}\nflagged_edges {}\n",
            self.edges_direct, self.edges_extended, self.edges_loop, self.flagged_edges
        ));
        s.push_str(&format!(
            "odometry_iters_mean {}\nodometry_iters_max {}\nba_iters_mean {}\nba_iters_max {}\n",
            self.odometry_iters_mean,
            self.odometry_iters_max,
            self.ba_iters_mean,
            self.ba_iters_max
        ));
        s
    }
}

pub fn write_trajectory(
    mut w: impl Write,
    trajectory: &BTreeMap<FrameId, CameraPose>,
) -> Result<()> {
    for (f, p) in trajectory {
        let [qw, qx, qy, qz] = p.rotation.wxyz();
        let c = p.position;
        writeln!(
            w,
            "traj {f} {qw:.17e} {qx:.17e} {qy:.17e} {qz:.17e} {:.17e} {:.17e} {:.17e}",
            c.x, c.y, c.z
        )?;
    }
    Ok(())
}

pub fn read_trajectory(reader: impl BufRead) -> Result<BTreeMap<FrameId, CameraPose>> {
    let mut out = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let n = i + 1;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let toks: Vec<&str> = body.split_whitespace().collect();
        if toks[0] != "traj" {
            return Err(Error::parse(n, format!("unknown record `{}`", toks[0])));
        }
        if toks.len() != 9 {
            return Err(Error::parse(
                n,
                format!("expected 8 fields after `traj`, found {}", toks.len() - 1),
            ));
        }
        let frame: FrameId = toks[1]
            .parse()
            .map_err(|_| Error::parse(n, format!("bad frame id `{}`", toks[1])))?;
        let mut v = [0.0; 7];
        for (k, t) in toks[2..].iter().enumerate() {
            v[k] = t
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::parse(n, format!("bad value `{t}`")))?;
        }
        let rotation = Rotation::from_wxyz(v[0], v[1], v[2], v[3])
            .map_err(|e| Error::parse(n, e.to_string()))?;
        if out
            .insert(
                frame,
                CameraPose::new(rotation, Vec3::new(v[4], v[5], v[6])),
            )
            .is_some()
        {
            return Err(Error::parse(n, format!("duplicate frame {frame}")));
        }
    }
    Ok(out)
}

/// Trajectory metrics over frames present in both `est` and `gt`.
pub fn compare_trajectories(
    est: &BTreeMap<FrameId, CameraPose>,
    gt: &BTreeMap<FrameId, CameraPose>,
) -> Result<TrajectoryMetrics> {
    let (e, g): (Vec<Vec3>, Vec<Vec3>) = est
        .iter()
        .filter_map(|(f, p)| gt.get(f).map(|q| (p.position, q.position)))
        .unzip();
    TrajectoryMetrics::compute(&e, &g)
}
