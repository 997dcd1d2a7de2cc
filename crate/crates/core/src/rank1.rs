//! Visual odometry by rank-1 factorization.
//!
//! Inside a keyframe-anchored window every frame `j` and every fully tracked
//! point `k` yield a vector `v_jk` that, without noise, equals the camera
//! position `c_j` times the point's inverse depth `d_k`. Stacking the `v_jk`
//! gives a `3m x n` matrix `M = C D` of rank one; its dominant factor pair
//! recovers every camera position and every inverse depth at once, up to a
//! common scale.
//!
//! `v_jk` comes from the midpoint of the common perpendicular between the
//! translation ray `alpha t` and the back-projected ray `p_k - beta p_jk` of a
//! unit-depth point. Writing both rays as rotations of `p_k` ("rotation
//! tricks") makes the relation `c_j ~ A_jk p_k` with
//! `A_jk = (alpha R(omega) + I - beta R(theta)) / 2`.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::geometry::{rotation_aligning, Mat3, Rotation, UnitBearing, Vec3};
use crate::relmotion::{two_point_translation, BearingPair, RansacConfig};
use crate::tracks::median;
use crate::tracks::{FrameId, FrameObservations, TrackId};

/// `R_j^T p`: a frame bearing expressed in keyframe orientation.
pub fn rotate_bearing(p_kj: &UnitBearing, r_j: &Rotation) -> UnitBearing {
    UnitBearing::new_unchecked(r_j.inverse_rotate(p_kj.as_vec()))
}

/// Why a (frame, point) pair yields no constraint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RaySignal {
    /// Rays (nearly) parallel: no parallax for this point.
    Skip,
    /// The point would lie behind one of the cameras.
    Cheirality,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MidpointParams {
    pub alpha: f64,
    pub beta: f64,
    pub midpoint: Vec3,
}

/// Determinant threshold of the 2x2 system below which rays count as parallel.
pub const PARALLEL_DET: f64 = 1e-9;

/// Closest points `a = alpha t` and `b = p_k - beta p_jk` of the two rays and
/// their midpoint.
pub fn ray_midpoint_params(
    t: &UnitBearing,
    p_k: &UnitBearing,
    p_jk: &UnitBearing,
) -> std::result::Result<MidpointParams, RaySignal> {
    let (t, pk, pjk) = (t.as_vec(), p_k.as_vec(), p_jk.as_vec());
    // (a - b) . t = 0 and (a - b) . p_jk = 0 with a - b = alpha t + beta p_jk - p_k.
    let g = t.dot(pjk);
    let det = 1.0 - g * g;
    if det.abs() < PARALLEL_DET {
        return Err(RaySignal::Skip);
    }
    let r1 = t.dot(pk);
    let r2 = pjk.dot(pk);
    let alpha = (r1 - g * r2) / det;
    let beta = (r2 - g * r1) / det;
    if alpha <= 0.0 || beta <= 0.0 {
        return Err(RaySignal::Cheirality);
    }
    let a = t * alpha;
    let b = pk - pjk * beta;
    Ok(MidpointParams {
        alpha,
        beta,
        midpoint: (a + b) * 0.5,
    })
}

/// `A_jk = (alpha R(omega) + I - beta R(theta)) / 2`.
pub fn camera_point_matrix(
    t: &UnitBearing,
    p_k: &UnitBearing,
    p_jk: &UnitBearing,
    alpha: f64,
    beta: f64,
) -> Mat3 {
    let r_omega = rotation_aligning(p_k, t).matrix();
    let r_theta = rotation_aligning(p_k, p_jk).matrix();
    (r_omega * alpha + Mat3::identity() - r_theta * beta) * 0.5
}

/// `v_jk = A_jk p_k`, approximately `c_j d_k`.
pub fn camera_point_vector(
    t: &UnitBearing,
    p_k: &UnitBearing,
    p_jk: &UnitBearing,
    alpha: f64,
    beta: f64,
) -> Vec3 {
    camera_point_matrix(t, p_k, p_jk, alpha, beta) * p_k.as_vec()
}

/// The `3m x n` matrix of `v_jk` blocks with optional missing cells.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ConstraintMatrix {
    tracks: Vec<TrackId>,
    frames: Vec<FrameId>,
    /// Row-major by frame.
    cells: Vec<Vec<Option<Vec3>>>,
}

impl ConstraintMatrix {
    pub fn new(tracks: Vec<TrackId>) -> Self {
        ConstraintMatrix {
            tracks,
            frames: vec![],
            cells: vec![],
        }
    }

    /// Exact rank-1 matrix `v_jk = c_j d_k`.
    pub fn from_factors(c: &[Vec3], d: &[f64]) -> Self {
        let mut m = ConstraintMatrix::new((0..d.len()).collect());
        for (j, cj) in c.iter().enumerate() {
            m.push_frame(j, d.iter().map(|dk| Some(cj * *dk)).collect())
                .unwrap();
        }
        m
    }

    pub fn tracks(&self) -> &[TrackId] {
        &self.tracks
    }

    pub fn frames(&self) -> &[FrameId] {
        &self.frames
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn n_tracks(&self) -> usize {
        self.tracks.len()
    }

    pub fn cell(&self, frame_row: usize, col: usize) -> Option<&Vec3> {
        self.cells[frame_row][col].as_ref()
    }

    pub fn row(&self, frame_row: usize) -> &[Option<Vec3>] {
        &self.cells[frame_row]
    }

    pub fn push_frame(&mut self, frame: FrameId, row: Vec<Option<Vec3>>) -> Result<()> {
        if row.len() != self.tracks.len() {
            return Err(Error::InvalidInput(format!(
                "row has {} cells for {} tracks",
                row.len(),
                self.tracks.len()
            )));
        }
        self.frames.push(frame);
        self.cells.push(row);
        Ok(())
    }

    /// Keeps the columns whose track satisfies `keep`.
    pub fn retain_tracks(&mut self, mut keep: impl FnMut(TrackId) -> bool) {
        let mask: Vec<bool> = self.tracks.iter().map(|t| keep(*t)).collect();
        fn filter<T>(v: &mut Vec<T>, mask: &[bool]) {
            let mut i = 0;
            v.retain(|_| {
                i += 1;
                mask[i - 1]
            });
        }
        filter(&mut self.tracks, &mask);
        for row in &mut self.cells {
            filter(row, &mask);
        }
    }

    /// Drops every frame row after `n_rows`.
    pub fn truncate_frames(&mut self, n_rows: usize) {
        self.frames.truncate(n_rows);
        self.cells.truncate(n_rows);
    }

    /// Dense `3m x n` copy with missing cells set to zero.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(3 * self.n_frames(), self.n_tracks());
        for (j, row) in self.cells.iter().enumerate() {
            for (k, cell) in row.iter().enumerate() {
                if let Some(v) = cell {
                    for a in 0..3 {
                        m[(3 * j + a, k)] = v[a];
                    }
                }
            }
        }
        m
    }

    pub fn present_cells(&self) -> usize {
        self.cells.iter().flatten().filter(|c| c.is_some()).count()
    }

    /// Squared fit error over present cells.
    pub fn objective(&self, c: &[Vec3], d: &[f64]) -> f64 {
        let mut sum = 0.0;
        for (j, row) in self.cells.iter().enumerate() {
            for (k, cell) in row.iter().enumerate() {
                if let Some(v) = cell {
                    sum += (c[j] * d[k] - v).norm_squared();
                }
            }
        }
        sum
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorizeConfig {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for FactorizeConfig {
    fn default() -> Self {
        FactorizeConfig {
            tol: 1e-10,
            max_iters: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Factorization {
    /// Camera positions, `sum |c_j|^2 = 1`.
    pub c: Vec<Vec3>,
    /// Inverse depths, majority positive.
    pub d: Vec<f64>,
    /// `r2 / r1` of the zero-filled matrix.
    pub singular_ratio: f64,
    pub iters: usize,
    /// `||M - C D||_F` over present cells after each iteration.
    pub residuals: Vec<f64>,
    /// Columns whose inverse depth came out non-positive.
    pub nonpositive: Vec<usize>,
    /// False when the iteration cap was hit and the last iterate was kept.
    pub converged: bool,
}

/// Ratio of the two largest singular values.
pub fn singular_ratio(m: &DMatrix<f64>) -> f64 {
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    match sv.as_slice() {
        [r1, r2, ..] if *r1 > 0.0 => r2 / r1,
        _ => 0.0,
    }
}

/// Dominant rank-1 factor pair of `M` by alternating least squares (power
/// iteration on `M^T M` when no cell is missing). Missing cells are left out
/// of both half-steps.
pub fn rank1_factorize(
    m: &ConstraintMatrix,
    init: Option<&[f64]>,
    config: &FactorizeConfig,
) -> Result<Factorization> {
    let (rows, cols) = (m.n_frames(), m.n_tracks());
    if rows < 1 || cols < 2 {
        return Err(Error::InvalidInput(format!(
            "factorization needs >= 1 frame and >= 2 tracks, got {rows}x{cols}"
        )));
    }
    let mut d: Vec<f64> = match init {
        Some(v) if v.len() == cols => v.to_vec(),
        Some(v) => {
            return Err(Error::InvalidInput(format!(
                "initial D has {} entries for {cols} tracks",
                v.len()
            )))
        }
        None => vec![1.0; cols],
    };
    let mut c = vec![Vec3::zeros(); rows];
    let mut prev: Option<(Vec<Vec3>, Vec<f64>)> = None;
    let mut residuals = Vec::new();
    let mut last_change = f64::INFINITY;

    for iter in 1..=config.max_iters {
        for (j, cj) in c.iter_mut().enumerate() {
            let mut num = Vec3::zeros();
            let mut den = 0.0;
            for (k, cell) in m.row(j).iter().enumerate() {
                if let Some(v) = cell {
                    num += v * d[k];
                    den += d[k] * d[k];
                }
            }
            *cj = if den > 0.0 { num / den } else { Vec3::zeros() };
        }
        let mut num = vec![0.0; cols];
        let mut den = vec![0.0; cols];
        for (j, cj) in c.iter().enumerate() {
            let cc = cj.norm_squared();
            for (k, cell) in m.row(j).iter().enumerate() {
                if let Some(v) = cell {
                    num[k] += cj.dot(v);
                    den[k] += cc;
                }
            }
        }
        for k in 0..cols {
            d[k] = if den[k] > 0.0 { num[k] / den[k] } else { 0.0 };
        }
        let norm_c = c.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
        if norm_c == 0.0 || !norm_c.is_finite() {
            return Err(Error::Degenerate("rank-1 factor vanished".into()));
        }
        c.iter_mut().for_each(|v| *v /= norm_c);
        d.iter_mut().for_each(|v| *v *= norm_c);
        residuals.push(m.objective(&c, &d).sqrt());

        if let Some((pc, pd)) = &prev {
            let dc = c
                .iter()
                .zip(pc)
                .map(|(a, b)| (a - b).norm_squared())
                .sum::<f64>()
                .sqrt();
            let dn = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dd = d
                .iter()
                .zip(pd)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            last_change = dc.max(if dn > 0.0 { dd / dn } else { 0.0 });
            if last_change < config.tol {
                return Ok(finish(m, c, d, iter, residuals));
            }
        }
        prev = Some((c.clone(), d.clone()));
    }
    Err(Error::NonConvergence {
        iters: config.max_iters,
        last_change,
        last: Box::new((c.iter().flat_map(|v| v.iter().copied()).collect(), d)),
    })
}

fn finish(
    m: &ConstraintMatrix,
    mut c: Vec<Vec3>,
    mut d: Vec<f64>,
    iters: usize,
    residuals: Vec<f64>,
) -> Factorization {
    let positive = d.iter().filter(|v| **v > 0.0).count();
    if 2 * positive < d.len() {
        c.iter_mut().for_each(|v| *v = -*v);
        d.iter_mut().for_each(|v| *v = -*v);
    }
    let nonpositive = d
        .iter()
        .enumerate()
        .filter(|(_, v)| **v <= 0.0)
        .map(|(k, _)| k)
        .collect();
    Factorization {
        c,
        d,
        singular_ratio: singular_ratio(&m.to_dense()),
        iters,
        residuals,
        nonpositive,
        converged: true,
    }
}

/// How far a local map has been processed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapState {
    Factorized,
    TriangulatedAugmented,
    BaRefined,
}

/// A point anchored on its keyframe bearing: `P = bearing / inv_depth`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapPoint {
    pub bearing: UnitBearing,
    pub inv_depth: f64,
}

impl MapPoint {
    pub fn position(&self) -> Vec3 {
        self.bearing.as_vec() / self.inv_depth
    }
}

/// Keyframe-anchored reconstruction of one window.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalMap {
    pub keyframe_id: FrameId,
    /// Members in order; the keyframe first.
    pub frames: Vec<FrameId>,
    /// `R_j^(i)`, keyframe-to-frame; identity for the keyframe.
    pub rotations: Vec<Rotation>,
    /// `c_j^(i)`; zero for the keyframe.
    pub positions: Vec<Vec3>,
    pub points: BTreeMap<TrackId, MapPoint>,
    pub state: MapState,
}

impl LocalMap {
    pub fn frame_index(&self, frame: FrameId) -> Option<usize> {
        self.frames.iter().position(|f| *f == frame)
    }

    pub fn pose(&self, idx: usize) -> crate::geometry::CameraPose {
        crate::geometry::CameraPose::new(self.rotations[idx], self.positions[idx])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OdometryConfig {
    pub min_tracks: usize,
    pub ransac: RansacConfig,
    pub factorize: FactorizeConfig,
    /// Keep the last iterate when the factorization hits its iteration cap
    /// instead of failing the step.
    pub accept_unconverged: bool,
}

impl Default for OdometryConfig {
    fn default() -> Self {
        OdometryConfig {
            min_tracks: 8,
            ransac: RansacConfig::default(),
            factorize: FactorizeConfig::default(),
            accept_unconverged: false,
        }
    }
}

/// Per-frame diagnostics of one odometry step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub frame: FrameId,
    pub iters: usize,
    pub singular_ratio: f64,
    pub residuals: Vec<f64>,
    pub inliers: usize,
    pub low_parallax: bool,
    pub skipped_cells: usize,
    pub columns: usize,
    pub converged: bool,
}

/// Incremental rank-1 odometry state for one window.
#[derive(Clone, Debug)]
pub struct WindowOdometry {
    keyframe_id: FrameId,
    keyframe_obs: FrameObservations,
    frames: Vec<FrameId>,
    rotations: Vec<Rotation>,
    translations: Vec<UnitBearing>,
    matrix: ConstraintMatrix,
    factorization: Option<Factorization>,
}

impl WindowOdometry {
    pub fn new(keyframe_id: FrameId, keyframe_obs: FrameObservations) -> Self {
        WindowOdometry {
            keyframe_id,
            keyframe_obs,
            frames: vec![],
            rotations: vec![],
            translations: vec![],
            matrix: ConstraintMatrix::default(),
            factorization: None,
        }
    }

    pub fn keyframe_id(&self) -> FrameId {
        self.keyframe_id
    }

    pub fn keyframe_obs(&self) -> &FrameObservations {
        &self.keyframe_obs
    }

    /// Non-keyframe members in order.
    pub fn frames(&self) -> &[FrameId] {
        &self.frames
    }

    pub fn matrix(&self) -> &ConstraintMatrix {
        &self.matrix
    }

    pub fn factorization(&self) -> Option<&Factorization> {
        self.factorization.as_ref()
    }

    /// Algorithm step for a new frame: translation direction by the two-point
    /// method, one new block row of `v_jk`, and a warm-started factorization.
    pub fn step(
        &mut self,
        frame: FrameId,
        obs: &FrameObservations,
        rotation: &Rotation,
        config: &OdometryConfig,
    ) -> Result<StepReport> {
        let pairs: Vec<BearingPair> = self
            .keyframe_obs
            .iter()
            .filter_map(|(t, ko)| {
                obs.get(t).map(|fo| BearingPair {
                    track: *t,
                    keyframe: ko.bearing,
                    frame: fo.bearing,
                })
            })
            .collect();
        if pairs.len() < config.min_tracks {
            return Err(Error::InsufficientSupport {
                what: "tracks shared with the keyframe",
                have: pairs.len(),
                need: config.min_tracks,
            });
        }
        let ransac = RansacConfig {
            seed: config.ransac.seed ^ (frame as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            ..config.ransac.clone()
        };
        let motion = two_point_translation(&pairs, rotation, &ransac)?;

        let mut matrix = if self.frames.is_empty() {
            ConstraintMatrix::new(pairs.iter().map(|p| p.track).collect())
        } else {
            self.matrix.clone()
        };
        matrix.retain_tracks(|t| obs.contains_key(&t));
        if matrix.n_tracks() < config.min_tracks {
            return Err(Error::InsufficientSupport {
                what: "tracks visible in every window frame",
                have: matrix.n_tracks(),
                need: config.min_tracks,
            });
        }

        let t = motion.translation_dir;
        let mut skipped = 0;
        let row: Vec<Option<Vec3>> = matrix
            .tracks()
            .iter()
            .map(|tr| {
                let p_k = self.keyframe_obs[tr].bearing;
                let p_jk = rotate_bearing(&obs[tr].bearing, rotation);
                match ray_midpoint_params(&t, &p_k, &p_jk) {
                    Ok(mp) => Some(camera_point_vector(&t, &p_k, &p_jk, mp.alpha, mp.beta)),
                    Err(_) => {
                        skipped += 1;
                        None
                    }
                }
            })
            .collect();
        matrix.push_frame(frame, row)?;

        let init = self.warm_start(&matrix);
        let fac = factorize_filtered(&mut matrix, Some(&init), config)?;

        self.frames.push(frame);
        self.rotations.push(*rotation);
        self.translations.push(t);
        self.matrix = matrix;
        let report = StepReport {
            frame,
            iters: fac.iters,
            singular_ratio: fac.singular_ratio,
            residuals: fac.residuals.clone(),
            inliers: motion.inlier_ids.len(),
            low_parallax: motion.low_parallax,
            skipped_cells: skipped,
            columns: self.matrix.n_tracks(),
            converged: fac.converged,
        };
        self.factorization = Some(fac);
        Ok(report)
    }

    /// Previous inverse depths for surviving columns; the median for others.
    fn warm_start(&self, matrix: &ConstraintMatrix) -> Vec<f64> {
        let prev: BTreeMap<TrackId, f64> = match &self.factorization {
            Some(f) => self
                .matrix
                .tracks()
                .iter()
                .copied()
                .zip(f.d.iter().copied())
                .collect(),
            None => BTreeMap::new(),
        };
        let mut known: Vec<f64> = matrix
            .tracks()
            .iter()
            .filter_map(|t| prev.get(t).copied())
            .collect();
        let fill = if known.is_empty() {
            1.0
        } else {
            median(&mut known)
        };
        matrix
            .tracks()
            .iter()
            .map(|t| prev.get(t).copied().unwrap_or(fill))
            .collect()
    }

    /// Drops every frame after `last` and refactorizes.
    pub fn truncate_after(&mut self, last: FrameId, config: &OdometryConfig) -> Result<()> {
        let keep = self
            .frames
            .iter()
            .position(|f| *f == last)
            .map(|p| p + 1)
            .unwrap_or(0);
        if keep == self.frames.len() {
            return Ok(());
        }
        self.frames.truncate(keep);
        self.rotations.truncate(keep);
        self.translations.truncate(keep);
        self.matrix.truncate_frames(keep);
        if keep == 0 {
            self.factorization = None;
            self.matrix = ConstraintMatrix::default();
            return Ok(());
        }
        let init = self.warm_start(&self.matrix);
        let mut matrix = self.matrix.clone();
        self.factorization = Some(factorize_filtered(&mut matrix, Some(&init), config)?);
        self.matrix = matrix;
        Ok(())
    }

    /// Current local map (keyframe plus every member frame).
    pub fn local_map(&self) -> LocalMap {
        let mut frames = vec![self.keyframe_id];
        frames.extend(&self.frames);
        let mut rotations = vec![Rotation::identity()];
        rotations.extend(&self.rotations);
        let mut positions = vec![Vec3::zeros()];
        let mut points = BTreeMap::new();
        match &self.factorization {
            Some(f) => {
                positions.extend(&f.c);
                for (k, t) in self.matrix.tracks().iter().enumerate() {
                    if f.d[k] > 0.0 {
                        points.insert(
                            *t,
                            MapPoint {
                                bearing: self.keyframe_obs[t].bearing,
                                inv_depth: f.d[k],
                            },
                        );
                    }
                }
            }
            None => positions.extend(std::iter::repeat_n(Vec3::zeros(), self.frames.len())),
        }
        LocalMap {
            keyframe_id: self.keyframe_id,
            frames,
            rotations,
            positions,
            points,
            state: MapState::Factorized,
        }
    }
}

/// Factorizes, drops columns that came out with no data or non-positive
/// inverse depth, and refactorizes once if any were dropped.
fn factorize_filtered(
    matrix: &mut ConstraintMatrix,
    init: Option<&[f64]>,
    config: &OdometryConfig,
) -> Result<Factorization> {
    let empty: BTreeSet<TrackId> = (0..matrix.n_tracks())
        .filter(|&k| (0..matrix.n_frames()).all(|j| matrix.cell(j, k).is_none()))
        .map(|k| matrix.tracks()[k])
        .collect();
    let mut init: Option<Vec<f64>> = init.map(|v| v.to_vec());
    if !empty.is_empty() {
        let keep: Vec<bool> = matrix.tracks().iter().map(|t| !empty.contains(t)).collect();
        init = init.map(|v| {
            v.into_iter()
                .zip(&keep)
                .filter(|(_, k)| **k)
                .map(|(x, _)| x)
                .collect()
        });
        matrix.retain_tracks(|t| !empty.contains(&t));
    }
    if matrix.n_tracks() < 2 {
        return Err(Error::InsufficientSupport {
            what: "factorizable tracks",
            have: matrix.n_tracks(),
            need: 2,
        });
    }
    let fac = factorize_lenient(matrix, init.as_deref(), config)?;
    if fac.nonpositive.is_empty() {
        return Ok(fac);
    }
    let bad: BTreeSet<TrackId> = fac
        .nonpositive
        .iter()
        .map(|&k| matrix.tracks()[k])
        .collect();
    let d: Vec<f64> = fac
        .d
        .iter()
        .zip(matrix.tracks())
        .filter(|(_, t)| !bad.contains(t))
        .map(|(d, _)| *d)
        .collect();
    matrix.retain_tracks(|t| !bad.contains(&t));
    if matrix.n_tracks() < 2 {
        return Err(Error::InsufficientSupport {
            what: "tracks with positive inverse depth",
            have: matrix.n_tracks(),
            need: 2,
        });
    }
    factorize_lenient(matrix, Some(&d), config)
}

fn factorize_lenient(
    m: &ConstraintMatrix,
    init: Option<&[f64]>,
    config: &OdometryConfig,
) -> Result<Factorization> {
    match rank1_factorize(m, init, &config.factorize) {
        Err(Error::NonConvergence { iters, last, .. }) if config.accept_unconverged => {
            let (flat, d) = *last;
            let c: Vec<Vec3> = flat
                .chunks(3)
                .map(|v| Vec3::new(v[0], v[1], v[2]))
                .collect();
            let residuals = vec![m.objective(&c, &d).sqrt()];
            let mut fac = finish(m, c, d, iters, residuals);
            fac.converged = false;
            Ok(fac)
        }
        r => r,
    }
}

/// Free-function form of [`WindowOdometry::step`] returning the updated map.
pub fn odometry_step(
    window: &mut WindowOdometry,
    frame: FrameId,
    obs: &FrameObservations,
    rotation: &Rotation,
    config: &OdometryConfig,
) -> Result<LocalMap> {
    window.step(frame, obs, rotation, config)?;
    Ok(window.local_map())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::exp_so3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: Vec3) -> UnitBearing {
        UnitBearing::new(v).unwrap()
    }

    fn random_unit(rng: &mut impl Rng) -> Vec3 {
        Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize()
    }

    #[test]
    fn rotate_bearing_cases() {
        let p = unit(Vec3::new(0.3, -0.2, 0.9));
        assert_eq!(rotate_bearing(&p, &Rotation::identity()), p);
        let r = exp_so3(&Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let q = rotate_bearing(&unit(Vec3::x()), &r);
        assert!((q.as_vec() - Vec3::new(0.0, -1.0, 0.0)).norm() < 1e-15);
        let back = q.rotated(&r);
        assert!((back.as_vec() - Vec3::x()).norm() < 1e-12);
    }

    #[test]
    fn coplanar_rays_intersect() {
        let t = unit(Vec3::x());
        let pk = unit(Vec3::z());
        let pjk = unit(Vec3::new(-1.0, 0.0, 1.0));
        let mp = ray_midpoint_params(&t, &pk, &pjk).unwrap();
        assert!((mp.alpha - 1.0).abs() < 1e-15);
        assert!((mp.beta - 2f64.sqrt()).abs() < 1e-15);
        assert!((mp.midpoint - Vec3::x()).norm() < 1e-15);
    }

    #[test]
    fn midpoint_signals() {
        let t = unit(Vec3::z());
        assert_eq!(
            ray_midpoint_params(&t, &unit(Vec3::x()), &t),
            Err(RaySignal::Skip)
        );
        // point behind the new camera
        let pk = unit(Vec3::z());
        let pjk = unit(Vec3::new(-1.0, 0.0, -1.0));
        assert_eq!(
            ray_midpoint_params(&unit(Vec3::x()), &pk, &pjk),
            Err(RaySignal::Cheirality)
        );
    }

    /// Unit-depth point at `p_k`, camera at `c` (both exact).
    fn exact_triple(rng: &mut impl Rng) -> (UnitBearing, UnitBearing, UnitBearing, Vec3) {
        loop {
            let pk = unit(Vec3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                1.0,
            ));
            let c = random_unit(rng) * rng.random_range(0.01..0.5);
            let Some(pjk) = UnitBearing::new(pk.as_vec() - c) else {
                continue;
            };
            let t = unit(c);
            if let Ok(mp) = ray_midpoint_params(&t, &pk, &pjk) {
                let _ = mp;
                return (t, pk, pjk, c);
            }
        }
    }

    #[test]
    fn exact_rays_give_camera_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let (t, pk, pjk, c) = exact_triple(&mut rng);
            let mp = ray_midpoint_params(&t, &pk, &pjk).unwrap();
            assert!((mp.midpoint - c).norm() < 1e-10);
            // perpendicularity residual of the 2x2 system
            let a_b = t.as_vec() * mp.alpha + pjk.as_vec() * mp.beta - pk.as_vec();
            assert!(a_b.dot(t.as_vec()).abs() < 1e-10 && a_b.dot(pjk.as_vec()).abs() < 1e-10);
        }
    }

    #[test]
    fn perturbed_ray_midpoint_stays_close() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let depth = rng.random_range(2.0..10.0);
            let x = Vec3::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                1.0,
            )
            .normalize()
                * depth;
            let c = Vec3::new(rng.random_range(0.5..1.0), rng.random_range(-0.2..0.2), 0.0);
            let pk = unit(x);
            let t = unit(c);
            let dir = (x - c).normalize();
            let axis = dir.cross(&random_unit(&mut rng)).normalize();
            let pjk = unit(exp_so3(&(axis * 1e-3)).rotate(&dir));
            // work at depth scale: scale c by 1/depth for the unit-depth problem
            let mp = ray_midpoint_params(&t, &pk, &pjk).unwrap();
            let est = mp.midpoint * depth;
            let sin_par = t.as_vec().cross(pjk.as_vec()).norm();
            assert!(
                (est - c).norm() < 5.0 * 1e-3 * depth / sin_par,
                "{} vs {}",
                est,
                c
            );
        }
    }

    #[test]
    fn camera_point_vector_equals_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut n = 0;
        while n < 10_000 {
            let t = unit(random_unit(&mut rng));
            let pk = unit(random_unit(&mut rng));
            let pjk = unit(random_unit(&mut rng));
            if let Ok(mp) = ray_midpoint_params(&t, &pk, &pjk) {
                let v = camera_point_vector(&t, &pk, &pjk, mp.alpha, mp.beta);
                let scale = 1.0 + mp.alpha + mp.beta;
                assert!(
                    (v - mp.midpoint).norm() < 1e-10 * scale,
                    "{v} {}",
                    mp.midpoint
                );
                n += 1;
            }
        }
    }

    #[test]
    fn camera_point_vector_is_position_times_inverse_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let depth = rng.random_range(5.0..15.0);
            let x = Vec3::new(
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.3..0.3),
                1.0,
            )
            .normalize()
                * depth;
            let c = random_unit(&mut rng) * 0.2;
            let pk = unit(x);
            let pjk = unit(x - c);
            let t = unit(c);
            let Ok(mp) = ray_midpoint_params(&t, &pk, &pjk) else {
                continue;
            };
            let v = camera_point_vector(&t, &pk, &pjk, mp.alpha, mp.beta);
            assert!((v - c / depth).norm() < 1e-9);
        }
    }

    #[test]
    fn aligned_ray_case() {
        // t == p_k: R(omega) is the identity.
        let t = unit(Vec3::new(0.1, 0.0, 1.0));
        let pk = t;
        let pjk = unit(Vec3::new(-0.5, 0.1, 1.0));
        let mp = ray_midpoint_params(&t, &pk, &pjk);
        if let Ok(mp) = mp {
            let a = camera_point_matrix(&t, &pk, &pjk, mp.alpha, mp.beta);
            let r_theta = rotation_aligning(&pk, &pjk).matrix();
            let expected =
                (Mat3::identity() * mp.alpha + Mat3::identity() - r_theta * mp.beta) * 0.5;
            assert!((a - expected).abs().max() < 1e-12);
            assert!((a * pk.as_vec() - mp.midpoint).norm() < 1e-12);
        } else {
            // Parallel to t means no parallax: the solver must say so.
            assert_eq!(mp, Err(RaySignal::Cheirality));
        }
    }

    fn random_factors(rng: &mut impl Rng, m: usize, n: usize) -> (Vec<Vec3>, Vec<f64>) {
        let c = (0..m)
            .map(|_| random_unit(rng) * rng.random_range(0.1..1.0))
            .collect();
        let d = (0..n).map(|_| rng.random_range(0.05..0.2)).collect();
        (c, d)
    }

    #[test]
    fn exact_rank_one_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (c0, d0) = random_factors(&mut rng, 6, 40);
        let m = ConstraintMatrix::from_factors(&c0, &d0);
        let f = rank1_factorize(&m, None, &FactorizeConfig::default()).unwrap();
        assert!(f.iters <= 2, "iters {}", f.iters);
        assert!(f.singular_ratio < 1e-9);
        let s = f.d[0] / d0[0];
        for k in 0..40 {
            assert!((f.d[k] - s * d0[k]).abs() < 1e-12 * s * d0[k]);
        }
        for j in 0..6 {
            assert!((f.c[j] * s - c0[j]).norm() < 1e-12 * c0[j].norm().max(1.0));
        }
        let cn: f64 = f.c.iter().map(|v| v.norm_squared()).sum();
        assert!((cn - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matches_svd_oracle_on_noisy_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let (c0, d0) = random_factors(&mut rng, 8, 30);
            let mut m = ConstraintMatrix::new((0..30).collect());
            for (j, cj) in c0.iter().enumerate() {
                let row = d0
                    .iter()
                    .map(|dk| Some(cj * *dk + random_unit(&mut rng) * 0.01))
                    .collect();
                m.push_frame(j, row).unwrap();
            }
            let f = rank1_factorize(&m, None, &FactorizeConfig::default()).unwrap();
            let svd = m.to_dense().svd(true, true);
            let (i1, _) = svd
                .singular_values
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap();
            let u = svd.u.unwrap().column(i1).into_owned();
            let c: Vec<f64> = f.c.iter().flat_map(|v| v.iter().copied()).collect();
            let dot: f64 = c.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
            let diff: f64 = c
                .iter()
                .zip(u.iter())
                .map(|(a, b)| (a - dot.signum() * b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(diff < 1e-8, "diff {diff}");
            let sigma1 = svd.singular_values[i1];
            let dn = f.d.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((dn - sigma1).abs() < 1e-8 * sigma1);
        }
    }

    #[test]
    fn residual_is_monotone_and_locally_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (c0, d0) = random_factors(&mut rng, 10, 50);
        let mut m = ConstraintMatrix::new((0..50).collect());
        for (j, cj) in c0.iter().enumerate() {
            let row = d0
                .iter()
                .enumerate()
                .map(|(k, dk)| {
                    if (j + k) % 7 == 0 {
                        None
                    } else {
                        Some(cj * *dk + random_unit(&mut rng) * 0.05)
                    }
                })
                .collect();
            m.push_frame(j, row).unwrap();
        }
        let f = rank1_factorize(&m, None, &FactorizeConfig::default()).unwrap();
        for w in f.residuals.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
        let obj = m.objective(&f.c, &f.d);
        assert!((obj.sqrt() - f.residuals.last().unwrap()).abs() < 1e-12);
        for _ in 0..200 {
            let c2: Vec<Vec3> =
                f.c.iter()
                    .map(|v| v + random_unit(&mut rng) * 1e-6)
                    .collect();
            let d2: Vec<f64> =
                f.d.iter()
                    .map(|v| v + rng.random_range(-1e-6..1e-6))
                    .collect();
            assert!(m.objective(&c2, &d2) >= obj - 1e-12);
        }
    }

    #[test]
    fn scale_gauge() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (c0, d0) = random_factors(&mut rng, 5, 20);
        let m = ConstraintMatrix::from_factors(&c0, &d0);
        let lambda = 3.7;
        let ms =
            ConstraintMatrix::from_factors(&c0.iter().map(|c| c * lambda).collect::<Vec<_>>(), &d0);
        let a = rank1_factorize(&m, None, &FactorizeConfig::default()).unwrap();
        let b = rank1_factorize(&ms, None, &FactorizeConfig::default()).unwrap();
        for j in 0..5 {
            for k in 0..20 {
                let pa = a.c[j] * a.d[k] * lambda;
                let pb = b.c[j] * b.d[k];
                assert!((pa - pb).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn preconditions() {
        let m = ConstraintMatrix::new(vec![0]);
        assert!(rank1_factorize(&m, None, &FactorizeConfig::default()).is_err());
        let mut m = ConstraintMatrix::new(vec![0, 1, 2]);
        m.push_frame(0, vec![Some(Vec3::x()), Some(Vec3::x()), Some(Vec3::y())])
            .unwrap();
        m.push_frame(1, vec![Some(Vec3::y()), Some(Vec3::z()), Some(Vec3::x())])
            .unwrap();
        let r = rank1_factorize(
            &m,
            None,
            &FactorizeConfig {
                tol: 0.0,
                max_iters: 3,
            },
        );
        assert!(matches!(r, Err(Error::NonConvergence { iters: 3, .. })));
    }
}
