//! Synthetic experiments: the initialization comparison on short clips and
//! the false-loop study on pose graphs.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::baseline::{run_baseline, BaselineConfig};
use crate::error::{Error, Result};
use crate::eval::{align_scale, normalized_position_error};
use crate::geometry::{exp_so3, Rotation, Vec3};
use crate::posegraph::{
    mark_outlier_edges, solve_l1, solve_l2_baseline, solve_robust, EdgeKind, GlobalPose,
    GlobalPoses, OutlierThresholds, PoseGraph, Sim3Edge, SolveConfig,
};
use crate::rank1::{LocalMap, OdometryConfig, WindowOdometry};
use crate::refine::{augment_partial_tracks, local_bundle_adjust, BaConfig};
use crate::synth::{synthesize, GroundTruth, SceneConfig};
use crate::tracks::{FrameId, TrackData};

/// Per-trial seed from a base seed and the trial index.
pub fn trial_seed(base: u64, trial: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(1000 + trial as u64);
    rng.random()
}

/// One method's result on one clip.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodResult {
    /// Per-camera normalized errors before refinement.
    pub raw: Vec<f64>,
    /// Per-camera normalized errors after bundle adjustment.
    pub refined: Vec<f64>,
    pub ba_iters: usize,
    pub ba_initial_cost: f64,
    pub ba_cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Fig5Trial {
    pub seed: u64,
    pub rank1: Option<MethodResult>,
    pub baseline: Option<MethodResult>,
    /// Alternating iterations of every factorization step.
    pub factorization_iters: Vec<usize>,
    /// Every step's objective sequence was non-increasing.
    pub monotone: bool,
    pub baseline_init_frame: Option<FrameId>,
    pub baseline_forced: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fig5Config {
    pub odometry: OdometryConfig,
    pub baseline: BaselineConfig,
    pub ba: BaConfig,
}

impl Default for Fig5Config {
    fn default() -> Self {
        Fig5Config {
            odometry: OdometryConfig {
                accept_unconverged: true,
                ..OdometryConfig::default()
            },
            baseline: BaselineConfig::default(),
            ba: BaConfig {
                outlier_px: None,
                ..BaConfig::default()
            },
        }
    }
}

/// Ground-truth centers in the first camera's frame.
fn local_truth(gt: &GroundTruth) -> Vec<Vec3> {
    let p0 = &gt.poses[0];
    gt.poses.iter().map(|p| p0.to_camera(&p.position)).collect()
}

/// Errors of a keyframe-anchored trajectory after least-squares scale.
fn clip_errors(map: &LocalMap, truth: &[Vec3]) -> Result<Vec<f64>> {
    let gt: Vec<Vec3> = map.frames.iter().map(|f| truth[*f]).collect();
    let s = align_scale(&map.positions, &gt)?;
    let est: Vec<Vec3> = map.positions.iter().map(|c| c * s).collect();
    normalized_position_error(&est, &gt)
}

fn refine_and_score(
    mut map: LocalMap,
    data: &TrackData,
    truth: &[Vec3],
    ba: &BaConfig,
) -> Result<MethodResult> {
    let raw = clip_errors(&map, truth)?;
    let kf_tracks: Vec<_> = data.frames[&map.keyframe_id].keys().copied().collect();
    augment_partial_tracks(&mut map, kf_tracks, &data.frames);
    let report = local_bundle_adjust(&map, &data.frames, &data.intrinsics, ba)?;
    let refined = clip_errors(&report.map, truth)?;
    Ok(MethodResult {
        raw,
        refined,
        ba_iters: report.iters,
        ba_initial_cost: report.initial_cost,
        ba_cost: report.cost,
    })
}

/// Rank-1 odometry over the whole clip as one window anchored at frame 0.
pub fn rank1_clip(
    data: &TrackData,
    config: &OdometryConfig,
) -> Result<(LocalMap, Vec<usize>, bool)> {
    let frames: Vec<FrameId> = data.frames.keys().copied().collect();
    let kf = frames[0];
    let r0 = *data.rotations.get(&kf).ok_or(Error::NoRotationSource)?;
    let mut odo = WindowOdometry::new(kf, data.frames[&kf].clone());
    let mut iters = vec![];
    let mut monotone = true;
    for &f in &frames[1..] {
        let r = *data.rotations.get(&f).ok_or(Error::NoRotationSource)?;
        let rep = odo.step(f, &data.frames[&f], &(r * r0.inverse()), config)?;
        iters.push(rep.iters);
        monotone &= rep
            .residuals
            .windows(2)
            .all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-15);
    }
    Ok((odo.local_map(), iters, monotone))
}

/// Runs both methods on one synthetic clip.
pub fn fig5_trial(scene: &SceneConfig, config: &Fig5Config) -> Result<Fig5Trial> {
    let (gt, data) = synthesize(scene)?;
    let truth = local_truth(&gt);
    let (rank1, factorization_iters, monotone) = match rank1_clip(&data, &config.odometry) {
        Ok((map, iters, mono)) => (
            refine_and_score(map, &data, &truth, &config.ba).ok(),
            iters,
            mono,
        ),
        Err(_) => (None, vec![], true),
    };
    let frames: Vec<FrameId> = data.frames.keys().copied().collect();
    let (baseline, init, forced) = match run_baseline(&data, &frames, &config.baseline) {
        Ok(run) => (
            refine_and_score(run.map, &data, &truth, &config.ba).ok(),
            Some(run.init_frame),
            run.forced,
        ),
        Err(_) => (None, None, false),
    };
    Ok(Fig5Trial {
        seed: scene.seed,
        rank1,
        baseline,
        factorization_iters,
        monotone,
        baseline_init_frame: init,
        baseline_forced: forced,
    })
}

/// `trials` clips of `scene` with derived seeds, in trial order.
pub fn fig5_cell(
    scene: &SceneConfig,
    trials: usize,
    config: &Fig5Config,
) -> Result<Vec<Fig5Trial>> {
    (0..trials)
        .into_par_iter()
        .map(|i| {
            let sc = SceneConfig {
                seed: trial_seed(scene.seed, i),
                ..scene.clone()
            };
            fig5_trial(&sc, config)
        })
        .collect()
}

/// Per-camera mean of the chosen error over trials where the method ran.
pub fn mean_per_camera(
    trials: &[Fig5Trial],
    pick: impl Fn(&Fig5Trial) -> Option<&Vec<f64>>,
) -> Vec<f64> {
    let rows: Vec<&Vec<f64>> = trials.iter().filter_map(pick).collect();
    let Some(n) = rows.iter().map(|r| r.len()).max() else {
        return vec![];
    };
    (0..n)
        .map(|j| {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r.get(j).copied()).collect();
            vals.iter().sum::<f64>() / vals.len().max(1) as f64
        })
        .collect()
}

/// Percentile bootstrap interval of the mean of `values`.
pub fn bootstrap_mean_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(|a, b| a.total_cmp(b));
    let lo = ((1.0 - level) / 2.0 * resamples as f64) as usize;
    let hi = (((1.0 + level) / 2.0 * resamples as f64) as usize).min(resamples - 1);
    (means[lo], means[hi])
}

/// Mean over cameras of one trial's error vector.
pub fn trial_mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Aggregates of one Figure-5 cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Fig5Summary {
    pub trials: usize,
    pub rank1_failures: usize,
    pub baseline_failures: usize,
    /// Trials where both methods ran; every mean below is over these.
    pub paired: usize,
    pub rank1_raw_per_camera: Vec<f64>,
    pub baseline_raw_per_camera: Vec<f64>,
    pub rank1_refined_per_camera: Vec<f64>,
    pub baseline_refined_per_camera: Vec<f64>,
    pub rank1_raw_mean: f64,
    pub baseline_raw_mean: f64,
    pub rank1_refined_mean: f64,
    pub baseline_refined_mean: f64,
    /// 95% bootstrap interval of the paired raw difference, rank-1 minus
    /// baseline.
    pub raw_difference_ci: (f64, f64),
    /// 95% bootstrap interval of the paired refined difference.
    pub refined_difference_ci: (f64, f64),
    /// `|rank-1 - baseline| / baseline` of the refined means.
    pub refined_relative_gap: f64,
    pub rank1_ba_iters_median: f64,
    pub baseline_ba_iters_median: f64,
    /// Trials whose last factorization converged within five iterations.
    pub final_factorization_within_five: f64,
    /// Factorization steps, over all trials, that converged within five.
    pub steps_within_five: f64,
    pub all_monotone: bool,
}

pub fn summarize_fig5(trials: &[Fig5Trial], bootstrap_seed: u64) -> Fig5Summary {
    let paired: Vec<(&MethodResult, &MethodResult)> = trials
        .iter()
        .filter_map(|t| Some((t.rank1.as_ref()?, t.baseline.as_ref()?)))
        .collect();
    let mean_of = |f: &dyn Fn(&(&MethodResult, &MethodResult)) -> f64| {
        paired.iter().map(f).sum::<f64>() / paired.len().max(1) as f64
    };
    let diffs = |refined: bool| -> Vec<f64> {
        paired
            .iter()
            .map(|(a, b)| {
                if refined {
                    trial_mean(&a.refined) - trial_mean(&b.refined)
                } else {
                    trial_mean(&a.raw) - trial_mean(&b.raw)
                }
            })
            .collect()
    };
    let median_iters = |pick: &dyn Fn(&Fig5Trial) -> Option<usize>| {
        let mut v: Vec<f64> = trials.iter().filter_map(pick).map(|i| i as f64).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            crate::tracks::median(&mut v)
        }
    };
    let rank1_refined_mean = mean_of(&|(a, _)| trial_mean(&a.refined));
    let baseline_refined_mean = mean_of(&|(_, b)| trial_mean(&b.refined));
    let steps: Vec<usize> = trials
        .iter()
        .flat_map(|t| t.factorization_iters.iter().copied())
        .collect();
    let finals: Vec<usize> = trials
        .iter()
        .filter_map(|t| t.factorization_iters.last().copied())
        .collect();
    let frac = |v: &[usize]| v.iter().filter(|&&i| i <= 5).count() as f64 / v.len().max(1) as f64;
    Fig5Summary {
        trials: trials.len(),
        rank1_failures: trials.iter().filter(|t| t.rank1.is_none()).count(),
        baseline_failures: trials.iter().filter(|t| t.baseline.is_none()).count(),
        paired: paired.len(),
        rank1_raw_per_camera: mean_per_camera(trials, |t| t.rank1.as_ref().map(|m| &m.raw)),
        baseline_raw_per_camera: mean_per_camera(trials, |t| t.baseline.as_ref().map(|m| &m.raw)),
        rank1_refined_per_camera: mean_per_camera(trials, |t| t.rank1.as_ref().map(|m| &m.refined)),
        baseline_refined_per_camera: mean_per_camera(trials, |t| {
            t.baseline.as_ref().map(|m| &m.refined)
        }),
        rank1_raw_mean: mean_of(&|(a, _)| trial_mean(&a.raw)),
        baseline_raw_mean: mean_of(&|(_, b)| trial_mean(&b.raw)),
        rank1_refined_mean,
        baseline_refined_mean,
        raw_difference_ci: bootstrap_mean_ci(&diffs(false), 2000, 0.95, bootstrap_seed),
        refined_difference_ci: bootstrap_mean_ci(&diffs(true), 2000, 0.95, bootstrap_seed ^ 1),
        refined_relative_gap: (rank1_refined_mean - baseline_refined_mean).abs()
            / baseline_refined_mean,
        rank1_ba_iters_median: median_iters(&|t| t.rank1.as_ref().map(|m| m.ba_iters)),
        baseline_ba_iters_median: median_iters(&|t| t.baseline.as_ref().map(|m| m.ba_iters)),
        final_factorization_within_five: frac(&finals),
        steps_within_five: frac(&steps),
        all_monotone: trials.iter().all(|t| t.monotone),
    }
}

// ---------------------------------------------------------------------------
// False loops

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FalseLoopConfig {
    pub keyframes: usize,
    /// Inlier edges are perturbed by this (radians, log-scale, relative position).
    pub edge_noise: f64,
    /// Injected loops as a fraction of the true edge count.
    pub outlier_fraction: f64,
    pub seed: u64,
}

impl Default for FalseLoopConfig {
    fn default() -> Self {
        FalseLoopConfig {
            keyframes: 12,
            edge_noise: 0.005,
            outlier_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Ground-truth keyframes on a ring with varying scale, plus the true edges:
/// consecutive (direct), two apart (extended) and ring-closing loops.
pub fn ring_truth(n: usize, seed: u64) -> (GlobalPoses, Vec<(usize, usize, EdgeKind)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = 5.0;
    let poses = (0..n)
        .map(|k| {
            let a = k as f64 / n as f64 * std::f64::consts::TAU;
            let p = if k == 0 {
                GlobalPose::gauge()
            } else {
                GlobalPose {
                    scale: rng.random_range(-0.3..0.3f64).exp(),
                    rotation: exp_so3(&Vec3::new(
                        rng.random_range(-0.05..0.05),
                        -a,
                        rng.random_range(-0.05..0.05),
                    )),
                    position: Vec3::new(
                        radius * a.sin(),
                        rng.random_range(-0.2..0.2),
                        radius - radius * a.cos(),
                    ),
                }
            };
            (k, p)
        })
        .collect();
    let mut pairs: Vec<_> = (0..n - 1).map(|i| (i, i + 1, EdgeKind::Direct)).collect();
    pairs.extend((0..n - 2).map(|i| (i, i + 2, EdgeKind::Extended)));
    // Ring closures between the tail and the start, then three chords.
    let mut loops = vec![];
    for d in 1..=3 {
        loops.extend((0..d).map(|i| (i, n - d + i)));
    }
    loops.extend((0..3).map(|k| (k, k + n / 2)));
    pairs.extend(loops.into_iter().map(|(i, j)| (i, j, EdgeKind::Loop)));
    (GlobalPoses { gauge: 0, poses }, pairs)
}

fn noisy_edge(
    truth: &GlobalPoses,
    i: usize,
    j: usize,
    kind: EdgeKind,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Sim3Edge> {
    let mut e = Sim3Edge::between((i, &truth.poses[&i]), (j, &truth.poses[&j]), kind)?;
    let w = Vec3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    e.rotation = exp_so3(&(w * sigma)) * e.rotation;
    e.scale *= (rng.random_range(-1.0..1.0) * sigma).exp();
    let d = Vec3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    e.position += d * sigma * e.position.norm();
    Ok(e)
}

/// Uniform random rotation (unit quaternion from four normals).
fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation {
    use rand_distr::{Distribution, StandardNormal};
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        if let Ok(r) = Rotation::from_wxyz(q[0], q[1], q[2], q[3]) {
            return r;
        }
    }
}

/// Loop edges with random rotation, log-scale in `[-ln 2, ln 2]` and a
/// position about the trajectory diameter, between keyframes more than three
/// apart that have no true edge.
pub fn inject_false_loops(
    graph: &mut PoseGraph,
    count: usize,
    diameter: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let ids: Vec<usize> = graph.keyframes.iter().copied().collect();
    let mut injected = vec![];
    let mut attempts = 0;
    while injected.len() < count {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::InvalidInput(
                "no free keyframe pair left for a false loop".into(),
            ));
        }
        let i = ids[rng.random_range(0..ids.len())];
        let j = ids[rng.random_range(0..ids.len())];
        if i.abs_diff(j) <= 3
            || graph
                .edges
                .iter()
                .any(|e| (e.from, e.to) == (i, j) || (e.from, e.to) == (j, i))
        {
            continue;
        }
        let dir = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if dir.norm() < 1e-3 {
            continue;
        }
        let pos = dir.normalize() * diameter * rng.random_range(0.5..1.5);
        let scale = rng.random_range(-2f64.ln()..2f64.ln()).exp();
        graph.add_edge(Sim3Edge::new(
            i,
            j,
            scale,
            random_rotation(rng),
            pos,
            EdgeKind::Loop,
        )?);
        injected.push(graph.edges.len() - 1);
    }
    Ok(injected)
}

/// Root mean squared keyframe position error against the truth, both in the
/// gauge of keyframe 0.
pub fn position_rmse(sol: &GlobalPoses, truth: &GlobalPoses) -> f64 {
    let n = truth.poses.len() as f64;
    (truth
        .poses
        .iter()
        .map(|(k, t)| (sol.poses[k].position - t.position).norm_squared())
        .sum::<f64>()
        / n)
        .sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FalseLoopReport {
    pub true_edges: usize,
    pub injected: Vec<usize>,
    pub flagged: Vec<usize>,
    pub precision: f64,
    pub recall: f64,
    pub clean_error: f64,
    /// Plain L1 solve of the corrupted graph.
    pub l1_error: f64,
    /// After excluding flagged loops and re-solving.
    pub l1_robust_error: f64,
    pub l2_error: f64,
    pub huber_delta: f64,
}

/// Builds a noisy ring graph, injects false loops and compares solvers.
pub fn false_loop_experiment(config: &FalseLoopConfig) -> Result<FalseLoopReport> {
    if !(0.0..1.0).contains(&config.outlier_fraction) {
        return Err(Error::InvalidInput(
            "outlier fraction must be in [0, 1)".into(),
        ));
    }
    let (truth, pairs) = ring_truth(config.keyframes, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(7);
    let mut clean = PoseGraph::new();
    for &(i, j, kind) in &pairs {
        clean.add_edge(noisy_edge(&truth, i, j, kind, config.edge_noise, &mut rng)?);
    }
    let diameter = truth
        .poses
        .values()
        .flat_map(|a| {
            truth
                .poses
                .values()
                .map(move |b| (a.position - b.position).norm())
        })
        .fold(0.0, f64::max);
    let count = (config.outlier_fraction * pairs.len() as f64).round() as usize;
    let mut corrupted = clean.clone();
    let injected = inject_false_loops(&mut corrupted, count, diameter, &mut rng)?;

    let cfg = SolveConfig::default();
    let (clean_sol, _) = solve_l1(&clean, None, &cfg)?;
    let (l1_sol, _) = solve_l1(&corrupted, None, &cfg)?;
    let th = OutlierThresholds::default();
    let flagged = mark_outlier_edges(&corrupted, &l1_sol, &th);
    let mut robust_graph = corrupted.clone();
    let (robust_sol, _, _) = solve_robust(&mut robust_graph, None, &th, &cfg)?;
    let huber_delta = 1.0;
    let (l2_sol, _) = solve_l2_baseline(&corrupted, None, huber_delta, &cfg)?;

    let hits = flagged.iter().filter(|f| injected.contains(f)).count() as f64;
    let precision = if flagged.is_empty() {
        1.0
    } else {
        hits / flagged.len() as f64
    };
    let recall = if injected.is_empty() {
        1.0
    } else {
        hits / injected.len() as f64
    };
    Ok(FalseLoopReport {
        true_edges: pairs.len(),
        injected,
        flagged,
        precision,
        recall,
        clean_error: position_rmse(&clean_sol, &truth),
        l1_error: position_rmse(&l1_sol, &truth),
        l1_robust_error: position_rmse(&robust_sol, &truth),
        l2_error: position_rmse(&l2_sol, &truth),
        huber_delta,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphSolver {
    L1,
    /// Squared loss with a Huber threshold.
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FalseLoopRun {
    pub solver: GraphSolver,
    pub clean_edges: usize,
    pub injected: Vec<usize>,
    pub flagged: Vec<usize>,
    pub precision: f64,
    pub recall: f64,
    /// Keyframe position RMSE of the corrupted-graph solve against the
    /// clean-graph L1 solve, both gauged at the first keyframe.
    pub error_vs_clean: f64,
}

/// Injects false loops into a copy of `clean`, solves it with `solver` and
/// compares against the clean L1 solution.
pub fn false_loop_run(
    clean: &PoseGraph,
    fraction: f64,
    solver: GraphSolver,
    huber_delta: f64,
    seed: u64,
) -> Result<FalseLoopRun> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidInput(
            "outlier fraction must be in [0, 1)".into(),
        ));
    }
    let cfg = SolveConfig::default();
    let (reference, _) = solve_l1(clean, None, &cfg)?;
    let diameter = reference
        .poses
        .values()
        .flat_map(|a| {
            reference
                .poses
                .values()
                .map(move |b| (a.position - b.position).norm())
        })
        .fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(8);
    let mut corrupted = clean.clone();
    let count = (fraction * clean.edges.len() as f64).round() as usize;
    let injected = inject_false_loops(&mut corrupted, count, diameter, &mut rng)?;
    let (sol, _) = match solver {
        GraphSolver::L1 => solve_l1(&corrupted, None, &cfg)?,
        GraphSolver::L2 => solve_l2_baseline(&corrupted, None, huber_delta, &cfg)?,
    };
    let flagged = mark_outlier_edges(&corrupted, &sol, &OutlierThresholds::default());
    let hits = flagged.iter().filter(|f| injected.contains(f)).count() as f64;
    Ok(FalseLoopRun {
        solver,
        clean_edges: clean.edges.len(),
        precision: if flagged.is_empty() {
            1.0
        } else {
            hits / flagged.len() as f64
        },
        recall: if injected.is_empty() {
            1.0
        } else {
            hits / injected.len() as f64
        },
        injected,
        flagged,
        error_vs_clean: position_rmse(&sol, &reference),
    })
}

/// The noisy ring graph of [`false_loop_experiment`] without injected loops.
pub fn noisy_ring_graph(config: &FalseLoopConfig) -> Result<(GlobalPoses, PoseGraph)> {
    let (truth, pairs) = ring_truth(config.keyframes, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(7);
    let mut clean = PoseGraph::new();
    for &(i, j, kind) in &pairs {
        clean.add_edge(noisy_edge(&truth, i, j, kind, config.edge_noise, &mut rng)?);
    }
    Ok((truth, clean))
}

/// Ground-truth poses of a solved map keyed by keyframe, for reporting.
pub fn positions_of(sol: &GlobalPoses) -> BTreeMap<usize, Vec3> {
    sol.poses.iter().map(|(k, p)| (*k, p.position)).collect()
}
