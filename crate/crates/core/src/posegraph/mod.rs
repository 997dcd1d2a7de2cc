//! Keyframe pose graph and its multi-stage L1 solve.
//!
//! Each keyframe `i` carries a global similarity `(s_i, R_i, c_i)` mapping its
//! local map into the world: `X_w = s_i R_i^T X^(i) + c_i`. An edge `i -> j`
//! stores `K_j`'s pose inside map `i` (`R_ij`, `c_ij`) and the scale ratio
//! `s_ij = s_i / s_j`.

mod build;
mod file;
mod irls;
mod solve;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

pub use build::{
    direct_edge, extended_edge, loop_edge, relative_scale, LoopConfig, EXTENDED_MIN_SHARED,
};
pub use file::{read_pose_graph, write_pose_graph, write_solution};
pub use solve::{
    incremental_update, mark_outlier_edges, solve_l1, solve_l2_baseline, solve_positions_l1,
    solve_robust, solve_rotations_l1, solve_scales_l1, Loss, OutlierThresholds, SolveConfig,
    SolveStats,
};

use crate::error::{Error, Result};
use crate::geometry::{Rotation, SimilarityTransform, Vec3};

pub type KeyframeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EdgeKind {
    Direct,
    Extended,
    Loop,
}

impl EdgeKind {
    pub fn letter(self) -> char {
        match self {
            EdgeKind::Direct => 'D',
            EdgeKind::Extended => 'E',
            EdgeKind::Loop => 'L',
        }
    }

    pub fn from_letter(s: &str) -> Option<Self> {
        match s {
            "D" => Some(EdgeKind::Direct),
            "E" => Some(EdgeKind::Extended),
            "L" => Some(EdgeKind::Loop),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sim3Edge {
    pub from: KeyframeId,
    pub to: KeyframeId,
    /// `s_i / s_j`.
    pub scale: f64,
    /// `R_j^(i)`: world-to-camera rotation of `to` inside map `from`.
    pub rotation: Rotation,
    /// `c_j^(i)`: center of `to` inside map `from`.
    pub position: Vec3,
    pub kind: EdgeKind,
    /// Excluded from solves (only ever set on loop edges).
    pub outlier: bool,
}

impl Sim3Edge {
    pub fn new(
        from: KeyframeId,
        to: KeyframeId,
        scale: f64,
        rotation: Rotation,
        position: Vec3,
        kind: EdgeKind,
    ) -> Result<Self> {
        if from == to {
            return Err(Error::InvalidInput(format!(
                "edge from keyframe {from} to itself"
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "edge scale {scale} must be positive"
            )));
        }
        Ok(Sim3Edge {
            from,
            to,
            scale,
            rotation,
            position,
            kind,
            outlier: false,
        })
    }

    /// The edge as the map `to -> from` similarity.
    pub fn transform(&self) -> SimilarityTransform {
        SimilarityTransform {
            scale: 1.0 / self.scale,
            rotation: self.rotation.inverse(),
            translation: self.position,
        }
    }

    /// Inverse of [`Sim3Edge::transform`].
    pub fn from_transform(
        from: KeyframeId,
        to: KeyframeId,
        t: &SimilarityTransform,
        kind: EdgeKind,
    ) -> Result<Self> {
        Sim3Edge::new(
            from,
            to,
            1.0 / t.scale,
            t.rotation.inverse(),
            t.translation,
            kind,
        )
    }

    /// The exact edge between two global poses.
    pub fn between(
        from: (KeyframeId, &GlobalPose),
        to: (KeyframeId, &GlobalPose),
        kind: EdgeKind,
    ) -> Result<Self> {
        let (i, pi) = from;
        let (j, pj) = to;
        Sim3Edge::new(
            i,
            j,
            pi.scale / pj.scale,
            pj.rotation * pi.rotation.inverse(),
            pi.rotation.rotate(&(pj.position - pi.position)) / pi.scale,
            kind,
        )
    }
}

/// Global similarity of one keyframe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlobalPose {
    pub scale: f64,
    /// World-to-camera.
    pub rotation: Rotation,
    pub position: Vec3,
}

impl GlobalPose {
    pub fn gauge() -> Self {
        GlobalPose {
            scale: 1.0,
            rotation: Rotation::identity(),
            position: Vec3::zeros(),
        }
    }

    /// Local map to world.
    pub fn to_world(&self) -> SimilarityTransform {
        SimilarityTransform {
            scale: self.scale,
            rotation: self.rotation.inverse(),
            translation: self.position,
        }
    }

    pub fn from_world(t: &SimilarityTransform) -> Self {
        GlobalPose {
            scale: t.scale,
            rotation: t.rotation.inverse(),
            position: t.translation,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalPoses {
    pub gauge: KeyframeId,
    pub poses: BTreeMap<KeyframeId, GlobalPose>,
}

impl GlobalPoses {
    /// Re-expresses every pose so that `gauge` becomes the identity.
    pub fn regauged(&self, gauge: KeyframeId) -> Option<GlobalPoses> {
        let g = self.poses.get(&gauge)?.to_world().inverse();
        Some(GlobalPoses {
            gauge,
            poses: self
                .poses
                .iter()
                .map(|(k, p)| (*k, GlobalPose::from_world(&g.compose(&p.to_world()))))
                .collect(),
        })
    }

    /// Largest rotation, log-scale and position discrepancy to `other` over
    /// shared keyframes.
    pub fn max_difference(&self, other: &GlobalPoses) -> (f64, f64, f64) {
        let mut d = (0.0f64, 0.0f64, 0.0f64);
        for (k, a) in &self.poses {
            if let Some(b) = other.poses.get(k) {
                d.0 = d.0.max(a.rotation.angle_to(&b.rotation));
                d.1 = d.1.max((a.scale.ln() - b.scale.ln()).abs());
                d.2 = d.2.max((a.position - b.position).norm());
            }
        }
        d
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PoseGraph {
    pub keyframes: BTreeSet<KeyframeId>,
    pub edges: Vec<Sim3Edge>,
}

impl PoseGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_keyframe(&mut self, id: KeyframeId) {
        self.keyframes.insert(id);
    }

    /// Adds an edge; both ends become keyframes.
    pub fn add_edge(&mut self, edge: Sim3Edge) {
        self.keyframes.insert(edge.from);
        self.keyframes.insert(edge.to);
        self.edges.push(edge);
    }

    pub fn edge(&self, from: KeyframeId, to: KeyframeId) -> Option<&Sim3Edge> {
        self.edges
            .iter()
            .find(|e| e.from == from && e.to == to && !e.outlier)
    }

    /// Edges that take part in a solve.
    pub fn active_edges(&self) -> impl Iterator<Item = (usize, &Sim3Edge)> {
        self.edges.iter().enumerate().filter(|(_, e)| !e.outlier)
    }

    /// Connected components over active edges, each sorted, ordered by first id.
    pub fn components(&self) -> Vec<Vec<KeyframeId>> {
        let mut adj: BTreeMap<KeyframeId, Vec<KeyframeId>> =
            self.keyframes.iter().map(|k| (*k, vec![])).collect();
        for (_, e) in self.active_edges() {
            adj.entry(e.from).or_default().push(e.to);
            adj.entry(e.to).or_default().push(e.from);
        }
        let mut seen = BTreeSet::new();
        let mut out = vec![];
        for &start in adj.keys() {
            if !seen.insert(start) {
                continue;
            }
            let mut comp = vec![start];
            let mut queue = VecDeque::from([start]);
            while let Some(v) = queue.pop_front() {
                for &w in &adj[&v] {
                    if seen.insert(w) {
                        comp.push(w);
                        queue.push_back(w);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    pub fn check_connected(&self) -> Result<()> {
        let comps = self.components();
        if comps.len() > 1 {
            return Err(Error::Disconnected(comps));
        }
        Ok(())
    }

    /// Initial poses by chaining edges along a breadth-first spanning tree from
    /// `gauge`, preferring direct edges.
    pub fn spanning_tree_init(&self, gauge: KeyframeId) -> Result<GlobalPoses> {
        self.check_connected()?;
        let mut order: Vec<&Sim3Edge> = self.active_edges().map(|(_, e)| e).collect();
        order.sort_by_key(|e| e.kind);
        let mut poses = BTreeMap::from([(gauge, GlobalPose::gauge())]);
        let mut queue = VecDeque::from([gauge]);
        while let Some(v) = queue.pop_front() {
            for e in &order {
                let (other, forward) = if e.from == v {
                    (e.to, true)
                } else if e.to == v {
                    (e.from, false)
                } else {
                    continue;
                };
                if poses.contains_key(&other) {
                    continue;
                }
                let pv = poses[&v].to_world();
                let t = e.transform();
                let w = if forward {
                    pv.compose(&t)
                } else {
                    pv.compose(&t.inverse())
                };
                poses.insert(other, GlobalPose::from_world(&w));
                queue.push_back(other);
            }
        }
        Ok(GlobalPoses { gauge, poses })
    }
}
