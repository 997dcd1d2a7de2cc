//! Three linear(ized) stages: rotations, then log-scales, then positions.

use std::collections::BTreeMap;

use nalgebra::DVector;

use super::irls::{self, IrlsConfig, Row};
use super::{EdgeKind, GlobalPose, GlobalPoses, KeyframeId, PoseGraph};
use crate::error::{Error, Result};
use crate::geometry::{exp_so3, log_so3, Rotation, Vec3};
use crate::tracks::median;

pub use super::irls::Loss;

#[derive(Clone, Debug, PartialEq)]
pub struct SolveConfig {
    pub max_outer: usize,
    /// Rotation stage stops once every tangent update is below this.
    pub outer_tol: f64,
    pub max_inner: usize,
    pub inner_rel_tol: f64,
    /// Residual floor of the L1 reweighting.
    pub eps: f64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            max_outer: 50,
            outer_tol: 1e-8,
            max_inner: 100,
            inner_rel_tol: 1e-10,
            eps: 1e-6,
        }
    }
}

impl SolveConfig {
    fn irls(&self) -> IrlsConfig {
        IrlsConfig {
            max_iters: self.max_inner,
            rel_tol: self.inner_rel_tol,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SolveStats {
    pub rotation_outer: usize,
    pub rotation_inner: usize,
    pub scale_inner: usize,
    pub position_inner: usize,
}

impl SolveStats {
    pub fn total_inner(&self) -> usize {
        self.rotation_inner + self.scale_inner + self.position_inner
    }
}

/// Unknown index per keyframe; the gauge has none.
fn index_map(graph: &PoseGraph, gauge: KeyframeId) -> BTreeMap<KeyframeId, usize> {
    graph
        .keyframes
        .iter()
        .filter(|k| **k != gauge)
        .enumerate()
        .map(|(i, k)| (*k, i))
        .collect()
}

fn stalled() -> Error {
    Error::Degenerate("pose-graph normal equations are singular".into())
}

fn rotation_residual(e: &super::Sim3Edge, ri: &Rotation, rj: &Rotation) -> Vec3 {
    log_so3(&(e.rotation * *ri * rj.inverse()))
}

/// Rotation stage. Returns rotations and `(outer, inner)` iteration counts.
fn rotations_stage(
    graph: &PoseGraph,
    init: &GlobalPoses,
    warm: bool,
    loss: Loss,
    cfg: &SolveConfig,
) -> Result<(BTreeMap<KeyframeId, Rotation>, usize, usize)> {
    let idx = index_map(graph, init.gauge);
    let n = 3 * idx.len();
    let mut rot: BTreeMap<KeyframeId, Rotation> =
        init.poses.iter().map(|(k, p)| (*k, p.rotation)).collect();
    rot.insert(init.gauge, Rotation::identity());
    let (mut outer, mut inner) = (0, 0);
    for it in 0..cfg.max_outer {
        outer += 1;
        let mut rows = Vec::new();
        for (g, (_, e)) in graph.active_edges().enumerate() {
            let r = rotation_residual(e, &rot[&e.from], &rot[&e.to]);
            let m = e.rotation.matrix();
            for a in 0..3 {
                let mut terms = Vec::with_capacity(4);
                if let Some(&i) = idx.get(&e.from) {
                    for b in 0..3 {
                        terms.push((3 * i + b, m[(a, b)]));
                    }
                }
                if let Some(&j) = idx.get(&e.to) {
                    terms.push((3 * j + a, -1.0));
                }
                rows.push(Row {
                    terms,
                    rhs: -r[a],
                    group: g,
                });
            }
        }
        let sol = irls::solve(
            &rows,
            n,
            &DVector::zeros(n),
            warm || it > 0,
            loss,
            &cfg.irls(),
        )
        .ok_or_else(stalled)?;
        inner += sol.iters;
        let mut max_step: f64 = 0.0;
        for (k, &i) in &idx {
            let d = Vec3::new(sol.x[3 * i], sol.x[3 * i + 1], sol.x[3 * i + 2]);
            max_step = max_step.max(d.norm());
            let r = rot.get_mut(k).expect("initialized");
            *r = exp_so3(&d) * *r;
        }
        if max_step < cfg.outer_tol {
            break;
        }
    }
    Ok((rot, outer, inner))
}

fn scales_stage(
    graph: &PoseGraph,
    init: &GlobalPoses,
    warm: bool,
    loss: Loss,
    cfg: &SolveConfig,
) -> Result<(BTreeMap<KeyframeId, f64>, usize)> {
    let idx = index_map(graph, init.gauge);
    let mut rows = Vec::new();
    for (g, (_, e)) in graph.active_edges().enumerate() {
        let mut terms = vec![];
        if let Some(&i) = idx.get(&e.from) {
            terms.push((i, 1.0));
        }
        if let Some(&j) = idx.get(&e.to) {
            terms.push((j, -1.0));
        }
        rows.push(Row {
            terms,
            rhs: e.scale.ln(),
            group: g,
        });
    }
    let x0 = DVector::from_iterator(idx.len(), idx.keys().map(|k| init.poses[k].scale.ln()));
    let sol = irls::solve(&rows, idx.len(), &x0, warm, loss, &cfg.irls()).ok_or_else(stalled)?;
    let mut out: BTreeMap<KeyframeId, f64> =
        idx.iter().map(|(k, &i)| (*k, sol.x[i].exp())).collect();
    out.insert(init.gauge, 1.0);
    Ok((out, sol.iters))
}

fn positions_stage(
    graph: &PoseGraph,
    init: &GlobalPoses,
    rotations: &BTreeMap<KeyframeId, Rotation>,
    scales: &BTreeMap<KeyframeId, f64>,
    warm: bool,
    loss: Loss,
    cfg: &SolveConfig,
) -> Result<(BTreeMap<KeyframeId, Vec3>, usize)> {
    let idx = index_map(graph, init.gauge);
    let mut rows = Vec::new();
    for (g, (_, e)) in graph.active_edges().enumerate() {
        let rel = rotations[&e.from].inverse_rotate(&e.position) * scales[&e.from];
        for a in 0..3 {
            let mut terms = vec![];
            if let Some(&j) = idx.get(&e.to) {
                terms.push((3 * j + a, 1.0));
            }
            if let Some(&i) = idx.get(&e.from) {
                terms.push((3 * i + a, -1.0));
            }
            rows.push(Row {
                terms,
                rhs: rel[a],
                group: g,
            });
        }
    }
    let n = 3 * idx.len();
    let x0 = DVector::from_iterator(
        n,
        idx.keys()
            .flat_map(|k| init.poses[k].position.iter().copied().collect::<Vec<_>>()),
    );
    let sol = irls::solve(&rows, n, &x0, warm, loss, &cfg.irls()).ok_or_else(stalled)?;
    let mut out: BTreeMap<KeyframeId, Vec3> = idx
        .iter()
        .map(|(k, &i)| {
            (
                *k,
                Vec3::new(sol.x[3 * i], sol.x[3 * i + 1], sol.x[3 * i + 2]),
            )
        })
        .collect();
    out.insert(init.gauge, Vec3::zeros());
    Ok((out, sol.iters))
}

fn check_init(graph: &PoseGraph, init: &GlobalPoses) -> Result<()> {
    graph.check_connected()?;
    if let Some(k) = graph.keyframes.iter().find(|k| !init.poses.contains_key(k)) {
        return Err(Error::InvalidInput(format!(
            "initial poses miss keyframe {k}"
        )));
    }
    Ok(())
}

/// Rotation stage alone from `init` rotations (gauge rotation held fixed).
pub fn solve_rotations_l1(
    graph: &PoseGraph,
    init: &GlobalPoses,
    cfg: &SolveConfig,
) -> Result<BTreeMap<KeyframeId, Rotation>> {
    check_init(graph, init)?;
    Ok(rotations_stage(graph, init, true, Loss::L1, cfg)?.0)
}

/// Scale stage alone (`log s_gauge = 0`), warm-started from `init` scales.
pub fn solve_scales_l1(
    graph: &PoseGraph,
    init: &GlobalPoses,
    cfg: &SolveConfig,
) -> Result<BTreeMap<KeyframeId, f64>> {
    check_init(graph, init)?;
    Ok(scales_stage(graph, init, true, Loss::L1, cfg)?.0)
}

/// Position stage alone (`c_gauge = 0`) given rotations and scales.
pub fn solve_positions_l1(
    graph: &PoseGraph,
    init: &GlobalPoses,
    rotations: &BTreeMap<KeyframeId, Rotation>,
    scales: &BTreeMap<KeyframeId, f64>,
    cfg: &SolveConfig,
) -> Result<BTreeMap<KeyframeId, Vec3>> {
    check_init(graph, init)?;
    Ok(positions_stage(graph, init, rotations, scales, true, Loss::L1, cfg)?.0)
}

fn solve_all(
    graph: &PoseGraph,
    init: Option<&GlobalPoses>,
    loss: Loss,
    cfg: &SolveConfig,
) -> Result<(GlobalPoses, SolveStats)> {
    graph.check_connected()?;
    let (init, warm) = match init {
        Some(p) => (p.clone(), true),
        None => {
            let gauge = *graph
                .keyframes
                .iter()
                .next()
                .ok_or_else(|| Error::InvalidInput("empty pose graph".into()))?;
            (graph.spanning_tree_init(gauge)?, false)
        }
    };
    check_init(graph, &init)?;
    let (rot, outer, rot_inner) = rotations_stage(graph, &init, warm, loss, cfg)?;
    let (scales, scale_inner) = scales_stage(graph, &init, warm, loss, cfg)?;
    let (pos, position_inner) = positions_stage(graph, &init, &rot, &scales, warm, loss, cfg)?;
    let poses = graph
        .keyframes
        .iter()
        .map(|k| {
            (
                *k,
                GlobalPose {
                    scale: scales[k],
                    rotation: rot[k],
                    position: pos[k],
                },
            )
        })
        .collect();
    Ok((
        GlobalPoses {
            gauge: init.gauge,
            poses,
        },
        SolveStats {
            rotation_outer: outer,
            rotation_inner: rot_inner,
            scale_inner,
            position_inner,
        },
    ))
}

/// All three L1 stages. Without `init` the solve is cold: a spanning-tree
/// initialization from the first keyframe and least-squares first weights.
pub fn solve_l1(
    graph: &PoseGraph,
    init: Option<&GlobalPoses>,
    cfg: &SolveConfig,
) -> Result<(GlobalPoses, SolveStats)> {
    solve_all(graph, init, Loss::L1, cfg)
}

/// The same stages under squared loss with a Huber threshold of `delta` on
/// each edge's residual norm.
pub fn solve_l2_baseline(
    graph: &PoseGraph,
    init: Option<&GlobalPoses>,
    delta: f64,
    cfg: &SolveConfig,
) -> Result<(GlobalPoses, SolveStats)> {
    solve_all(graph, init, Loss::Huber(delta), cfg)
}

/// Adds `new_kf` to `prev` by chaining one of its edges onto an already
/// solved neighbor (direct edges first), then re-solves warm.
pub fn incremental_update(
    graph: &PoseGraph,
    new_kf: KeyframeId,
    prev: &GlobalPoses,
    cfg: &SolveConfig,
) -> Result<(GlobalPoses, SolveStats)> {
    let mut init = prev.clone();
    if graph.keyframes.len() == 1 && graph.keyframes.contains(&new_kf) {
        init.gauge = new_kf;
        init.poses = BTreeMap::from([(new_kf, GlobalPose::gauge())]);
        return Ok((init, SolveStats::default()));
    }
    if !init.poses.contains_key(&new_kf) {
        let mut candidates: Vec<&super::Sim3Edge> = graph
            .active_edges()
            .map(|(_, e)| e)
            .filter(|e| {
                (e.to == new_kf && prev.poses.contains_key(&e.from))
                    || (e.from == new_kf && prev.poses.contains_key(&e.to))
            })
            .collect();
        candidates.sort_by_key(|e| e.kind);
        let Some(e) = candidates.first() else {
            return Err(Error::Disconnected(graph.components()));
        };
        let w = if e.to == new_kf {
            prev.poses[&e.from].to_world().compose(&e.transform())
        } else {
            prev.poses[&e.to]
                .to_world()
                .compose(&e.transform().inverse())
        };
        init.poses.insert(new_kf, GlobalPose::from_world(&w));
    }
    solve_l1(graph, Some(&init), cfg)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OutlierThresholds {
    /// Rotation geodesic, radians.
    pub rotation: f64,
    /// Absolute log-scale residual.
    pub log_scale: f64,
    /// Position residual as a multiple of the median edge length.
    pub position_factor: f64,
}

impl Default for OutlierThresholds {
    fn default() -> Self {
        OutlierThresholds {
            rotation: 5f64.to_radians(),
            log_scale: 1.5f64.ln(),
            position_factor: 3.0,
        }
    }
}

impl OutlierThresholds {
    pub fn infinite() -> Self {
        OutlierThresholds {
            rotation: f64::INFINITY,
            log_scale: f64::INFINITY,
            position_factor: f64::INFINITY,
        }
    }
}

/// Per-edge stage residuals `(rotation angle, |log-scale|, position norm)`.
pub fn edge_residuals(graph: &PoseGraph, sol: &GlobalPoses) -> Vec<(f64, f64, f64)> {
    graph
        .edges
        .iter()
        .map(|e| {
            let (pi, pj) = (&sol.poses[&e.from], &sol.poses[&e.to]);
            let rot = rotation_residual(e, &pi.rotation, &pj.rotation).norm();
            let sc = (pi.scale.ln() - pj.scale.ln() - e.scale.ln()).abs();
            let pos = ((pj.position - pi.position)
                - pi.rotation.inverse_rotate(&e.position) * pi.scale)
                .norm();
            (rot, sc, pos)
        })
        .collect()
}

/// Indices of edges whose residual exceeds any stage threshold.
pub fn mark_outlier_edges(
    graph: &PoseGraph,
    sol: &GlobalPoses,
    th: &OutlierThresholds,
) -> Vec<usize> {
    let mut lengths: Vec<f64> = graph
        .active_edges()
        .map(|(_, e)| (sol.poses[&e.to].position - sol.poses[&e.from].position).norm())
        .collect();
    let med = if lengths.is_empty() {
        0.0
    } else {
        median(&mut lengths)
    };
    edge_residuals(graph, sol)
        .iter()
        .enumerate()
        .filter(|(_, (r, s, p))| {
            *r > th.rotation || *s > th.log_scale || *p > th.position_factor * med
        })
        .map(|(i, _)| i)
        .collect()
}

/// L1 solve, outlier marking, exclusion of flagged loop edges and one
/// re-solve. Returns the solution and every flagged edge index.
pub fn solve_robust(
    graph: &mut PoseGraph,
    init: Option<&GlobalPoses>,
    th: &OutlierThresholds,
    cfg: &SolveConfig,
) -> Result<(GlobalPoses, SolveStats, Vec<usize>)> {
    let (sol, mut stats) = solve_l1(graph, init, cfg)?;
    let flagged = mark_outlier_edges(graph, &sol, th);
    let mut excluded = false;
    for &i in &flagged {
        let e = &mut graph.edges[i];
        if e.kind == EdgeKind::Loop && !e.outlier {
            e.outlier = true;
            excluded = true;
        }
    }
    if !excluded {
        return Ok((sol, stats, flagged));
    }
    let (again, s2) = solve_l1(graph, Some(&sol), cfg)?;
    stats.rotation_outer += s2.rotation_outer;
    stats.rotation_inner += s2.rotation_inner;
    stats.scale_inner += s2.scale_inner;
    stats.position_inner += s2.position_inner;
    Ok((again, stats, flagged))
}
