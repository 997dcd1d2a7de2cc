//! `rank1slam`: synthetic data, the SLAM pipeline and the experiments from
//! the command line.
//!
//! Exit status: 0 on success, 2 for usage errors, 3 for unreadable or
//! malformed input, 4 for numerical failures, 1 for anything else.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use slam_core::experiments::{
    false_loop_run, fig5_cell, noisy_ring_graph, summarize_fig5, FalseLoopConfig, Fig5Config,
    GraphSolver,
};
use slam_core::pipeline::{
    compare_trajectories, read_trajectory, rotation_source, run_slam, write_trajectory, SlamConfig,
    SlamMetrics,
};
use slam_core::posegraph::{
    read_pose_graph, solve_l1, solve_l2_baseline, solve_robust, write_pose_graph, write_solution,
    OutlierThresholds, SolveConfig,
};
use slam_core::synth::{synthesize, DepthRange, Motion, SceneConfig};
use slam_core::tracks::{read_track_file, write_track_file, TrackData};
use slam_core::Error;

#[derive(Parser)]
#[command(
    name = "rank1slam",
    version,
    about = "Monocular SLAM with rank-1 factorization odometry"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic track file with `rot` and `gt` records.
    Synth(SynthArgs),
    /// Run the full pipeline on a track file.
    Slam(SlamArgs),
    /// Compare rank-1 odometry with triangulation and PnP on short clips.
    Fig5(Fig5Args),
    /// Inject false loops into a pose graph and solve it.
    Falseloop(FalseLoopArgs),
    /// Solve a pose-graph file and print SOLUTION lines.
    PosegraphSolve(SolveArgs),
    /// Compare a trajectory file against the `gt` records of a track file.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MotionArg {
    Forward,
    Circular,
}

impl From<MotionArg> for Motion {
    fn from(m: MotionArg) -> Self {
        match m {
            MotionArg::Forward => Motion::Forward,
            MotionArg::Circular => Motion::Circular,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DepthArg {
    Close,
    Far,
}

impl From<DepthArg> for DepthRange {
    fn from(d: DepthArg) -> Self {
        match d {
            DepthArg::Close => DepthRange::Close,
            DepthArg::Far => DepthRange::Far,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    L1,
    L2,
}

impl From<SolverArg> for GraphSolver {
    fn from(s: SolverArg) -> Self {
        match s {
            SolverArg::L1 => GraphSolver::L1,
            SolverArg::L2 => GraphSolver::L2,
        }
    }
}

#[derive(clap::Args)]
struct SceneArgs {
    #[arg(long, value_enum, default_value = "forward")]
    motion: MotionArg,
    #[arg(long, value_enum, default_value = "far")]
    depth: DepthArg,
    #[arg(long, default_value_t = 30)]
    frames: usize,
    /// Distance between consecutive cameras.
    #[arg(long, default_value_t = 0.05, allow_hyphen_values = true)]
    interval: f64,
    #[arg(long, default_value_t = 60.0)]
    hfov_deg: f64,
    #[arg(long, default_value_t = 800)]
    width: u32,
    #[arg(long, default_value_t = 600)]
    height: u32,
    #[arg(long, default_value_t = 200)]
    points: usize,
    /// Pixel noise standard deviation.
    #[arg(long, default_value_t = 3.0, allow_hyphen_values = true)]
    noise_px: f64,
    /// Rotation noise of the `rot` records, degrees.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    rot_noise_deg: f64,
    /// Visibility cone around random surface normals, degrees.
    #[arg(long, allow_hyphen_values = true)]
    view_cone_deg: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SceneArgs {
    fn config(&self) -> SceneConfig {
        SceneConfig {
            motion: self.motion.into(),
            depth: self.depth.into(),
            n_frames: self.frames,
            camera_interval: self.interval,
            hfov_deg: self.hfov_deg,
            width: self.width,
            height: self.height,
            n_points: self.points,
            pixel_noise_sigma: self.noise_px,
            rotation_noise_deg: self.rot_noise_deg,
            view_cone_deg: self.view_cone_deg,
            seed: self.seed,
        }
    }
}

#[derive(clap::Args)]
struct SynthArgs {
    #[command(flatten)]
    scene: SceneArgs,
    /// Output track file; standard output when absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SlamArgs {
    /// Input track file.
    tracks: PathBuf,
    /// Perturb the `gt` rotations by this many degrees instead of using `rot`
    /// records.
    #[arg(long, allow_hyphen_values = true)]
    rot_noise_deg: Option<f64>,
    #[arg(long, default_value_t = 0)]
    rot_seed: u64,
    /// Keep a frame in the window while more than this fraction of the
    /// keyframe's tracks is present.
    #[arg(long, default_value_t = 0.3, allow_hyphen_values = true)]
    expand_ratio: f64,
    /// Keyframe median-parallax threshold, degrees.
    #[arg(long, default_value_t = 1.15, allow_hyphen_values = true)]
    parallax_deg: f64,
    /// Extended edges need more than this many shared tracks.
    #[arg(long, default_value_t = 50)]
    extended_min_shared: usize,
    /// Loop candidates need more than this many shared tracks.
    #[arg(long, default_value_t = 30)]
    loop_min_shared: usize,
    /// Loop candidates must be more than this many keyframes apart.
    #[arg(long, default_value_t = 3)]
    loop_separation: usize,
    /// Drop points reprojecting worse than this after bundle adjustment.
    #[arg(long, default_value_t = 5.0, allow_hyphen_values = true)]
    ba_outlier_px: f64,
    /// Trajectory output; standard output when absent.
    #[arg(long)]
    traj: Option<PathBuf>,
    /// Pose-graph output with the solution.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// JSON metrics output (requires `gt` records).
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(clap::Args)]
struct Fig5Args {
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["circular", "forward"])]
    motions: Vec<MotionArg>,
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["close", "far"])]
    depths: Vec<DepthArg>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    frames: usize,
    #[arg(long, default_value_t = 3.0, allow_hyphen_values = true)]
    noise_px: f64,
    #[arg(long, default_value_t = 0.05, allow_hyphen_values = true)]
    interval: f64,
    /// Baseline initialization parallax, degrees.
    #[arg(long, default_value_t = 1.15, allow_hyphen_values = true)]
    parallax_deg: f64,
    /// Per-camera rows in the report.
    #[arg(long)]
    per_camera: bool,
    /// JSON report output.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(clap::Args)]
struct FalseLoopArgs {
    /// Pose-graph file to corrupt; a synthetic ring graph when absent.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Injected loops as a fraction of the clean edge count.
    #[arg(long, default_value_t = 0.1, allow_hyphen_values = true)]
    fraction: f64,
    #[arg(long, value_enum, default_value = "l1")]
    solver: SolverArg,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    huber_delta: f64,
    /// Keyframes of the synthetic ring.
    #[arg(long, default_value_t = 12)]
    keyframes: usize,
    /// Edge noise of the synthetic ring.
    #[arg(long, default_value_t = 0.005, allow_hyphen_values = true)]
    edge_noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct SolveArgs {
    /// Input pose-graph file.
    graph: PathBuf,
    #[arg(long, value_enum, default_value = "l1")]
    solver: SolverArg,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    huber_delta: f64,
    /// Flag outlier edges, exclude flagged loops and re-solve (L1 only).
    #[arg(long)]
    robust: bool,
    /// Start from the file's SOLUTION lines.
    #[arg(long)]
    warm: bool,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Trajectory file.
    traj: PathBuf,
    /// Track file with `gt` records.
    #[arg(long)]
    gt: PathBuf,
    /// JSON output instead of key-value lines.
    #[arg(long)]
    json: bool,
}

enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(Error::Io(e.into()))
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(Error::InvalidInput(_) | Error::NoRotationSource) => 2,
            CliError::Core(Error::Parse { .. } | Error::MissingIntrinsics) => 3,
            CliError::Core(e) if e.is_numerical() => 4,
            CliError::Core(_) => 1,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::Core(e) => e.to_string(),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

fn usage<T>(message: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(message.into()))
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| {
        CliError::Core(Error::Io(io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        )))
    })
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| {
        CliError::Core(Error::Io(io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        )))
    })
}

/// Writes to `path`, or to standard output when absent.
fn output(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn read_tracks(path: &Path) -> CliResult<TrackData> {
    Ok(read_track_file(open(path)?)?)
}

fn cmd_synth(args: &SynthArgs) -> CliResult {
    let cfg = args.scene.config();
    cfg.validate()?;
    let (_, data) = synthesize(&cfg)?;
    let mut w = output(args.out.as_deref())?;
    writeln!(w, "# synth {}", serde_json::to_string(&cfg)?)?;
    write_track_file(&mut w, &data)?;
    w.flush()?;
    Ok(())
}

fn cmd_slam(args: &SlamArgs) -> CliResult {
    if !(0.0..1.0).contains(&args.expand_ratio) {
        return usage("--expand-ratio must be in [0, 1)");
    }
    if !(args.parallax_deg > 0.0) {
        return usage("--parallax-deg must be positive");
    }
    if !(args.ba_outlier_px > 0.0) {
        return usage("--ba-outlier-px must be positive");
    }
    if let Some(n) = args.rot_noise_deg {
        if !(n >= 0.0) {
            return usage("--rot-noise-deg must be non-negative");
        }
    }
    let data = read_tracks(&args.tracks)?;
    let rotations = rotation_source(&data, args.rot_noise_deg, args.rot_seed)?;
    let mut cfg = SlamConfig::default();
    cfg.window.expand_ratio = args.expand_ratio;
    cfg.window.parallax_threshold = args.parallax_deg.to_radians();
    cfg.extended_min_shared = args.extended_min_shared;
    cfg.loop_min_shared_tracks = args.loop_min_shared;
    cfg.loop_min_separation = args.loop_separation;
    cfg.ba.outlier_px = Some(args.ba_outlier_px);
    let out = run_slam(&data, &rotations, &cfg)?;

    let mut w = output(args.traj.as_deref())?;
    write_trajectory(&mut w, &out.trajectory)?;
    w.flush()?;
    if let Some(p) = &args.graph {
        let mut g = create(p)?;
        write_pose_graph(&mut g, &out.graph, Some(&out.solution))?;
        g.flush()?;
    }

    let thresholds = json!({
        "expand_ratio": args.expand_ratio,
        "parallax_deg": args.parallax_deg,
        "extended_min_shared": args.extended_min_shared,
        "loop_min_shared": args.loop_min_shared,
        "loop_separation": args.loop_separation,
        "ba_outlier_px": args.ba_outlier_px,
        "rot_noise_deg": args.rot_noise_deg,
        "rot_seed": args.rot_seed,
    });
    let mut err = io::stderr().lock();
    writeln!(err, "keyframes {}", out.keyframes.len())?;
    writeln!(err, "frames {}", out.trajectory.len())?;
    match SlamMetrics::compute(&out, &data) {
        Some(m) => {
            let m = m?;
            write!(err, "{}", m.to_key_value())?;
            if let Some(p) = &args.metrics {
                let doc = json!({
                    "thresholds": thresholds,
                    "keyframe_ids": out.keyframes,
                    "metrics": m,
                    "keyframes": out.reports,
                    "odometry_iters": out.odometry_iters,
                });
                let mut f = create(p)?;
                serde_json::to_writer_pretty(&mut f, &doc)?;
                writeln!(f)?;
                f.flush()?;
            }
        }
        None if args.metrics.is_some() => {
            return usage("--metrics needs `gt` records in the track file")
        }
        None => {}
    }
    Ok(())
}

fn cmd_fig5(args: &Fig5Args) -> CliResult {
    if args.trials == 0 {
        return usage("--trials must be positive");
    }
    if args.motions.is_empty() || args.depths.is_empty() {
        return usage("--motions and --depths must not be empty");
    }
    if !(args.parallax_deg > 0.0) {
        return usage("--parallax-deg must be positive");
    }
    let mut config = Fig5Config::default();
    config.baseline.parallax_threshold = args.parallax_deg.to_radians();
    let mut w = BufWriter::new(io::stdout().lock());
    writeln!(
        w,
        "# trials {} seed {} frames {} noise_px {} interval {} parallax_deg {}",
        args.trials, args.seed, args.frames, args.noise_px, args.interval, args.parallax_deg
    )?;
    let mut cells = vec![];
    for &m in &args.motions {
        for &d in &args.depths {
            let (motion, depth): (Motion, DepthRange) = (m.into(), d.into());
            let scene = SceneConfig {
                motion,
                depth,
                n_frames: args.frames,
                camera_interval: args.interval,
                pixel_noise_sigma: args.noise_px,
                seed: args.seed,
                ..SceneConfig::default()
            };
            scene.validate()?;
            let trials = fig5_cell(&scene, args.trials, &config)?;
            let s = summarize_fig5(&trials, args.seed);
            let name = format!(
                "{} {}",
                json!(motion).as_str().unwrap_or(""),
                json!(depth).as_str().unwrap_or("")
            );
            writeln!(
                w,
                "cell {name} trials {} paired {} rank1_failures {} baseline_failures {}",
                s.trials, s.paired, s.rank1_failures, s.baseline_failures
            )?;
            writeln!(
                w,
                "cell {name} raw rank1 {} baseline {} difference_ci {} {}",
                s.rank1_raw_mean, s.baseline_raw_mean, s.raw_difference_ci.0, s.raw_difference_ci.1
            )?;
            writeln!(
                w,
                "cell {name} refined rank1 {} baseline {} relative_gap {}",
                s.rank1_refined_mean, s.baseline_refined_mean, s.refined_relative_gap
            )?;
            writeln!(
                w,
                "cell {name} ba_iters_median rank1 {} baseline {}",
                s.rank1_ba_iters_median, s.baseline_ba_iters_median
            )?;
            writeln!(
                w,
                "cell {name} factorization final_within_five {} steps_within_five {} monotone {}",
                s.final_factorization_within_five, s.steps_within_five, s.all_monotone
            )?;
            if args.per_camera {
                for j in 0..s.rank1_raw_per_camera.len() {
                    let at = |v: &Vec<f64>| v.get(j).copied().unwrap_or(f64::NAN);
                    writeln!(
                        w,
                        "camera {name} {j} {} {} {} {}",
                        at(&s.rank1_raw_per_camera),
                        at(&s.baseline_raw_per_camera),
                        at(&s.rank1_refined_per_camera),
                        at(&s.baseline_refined_per_camera)
                    )?;
                }
            }
            cells.push(json!({ "motion": motion, "depth": depth, "summary": s }));
        }
    }
    w.flush()?;
    if let Some(p) = &args.json {
        let doc = json!({
            "trials": args.trials,
            "seed": args.seed,
            "frames": args.frames,
            "noise_px": args.noise_px,
            "interval": args.interval,
            "parallax_deg": args.parallax_deg,
            "cells": cells,
        });
        let mut f = create(p)?;
        serde_json::to_writer_pretty(&mut f, &doc)?;
        writeln!(f)?;
        f.flush()?;
    }
    Ok(())
}

fn cmd_falseloop(args: &FalseLoopArgs) -> CliResult {
    if !(0.0..1.0).contains(&args.fraction) {
        return usage("--fraction must be in [0, 1)");
    }
    if !(args.huber_delta > 0.0) {
        return usage("--huber-delta must be positive");
    }
    let graph = match &args.graph {
        Some(p) => read_pose_graph(open(p)?)?.0,
        None => {
            if args.keyframes < 8 {
                return usage("--keyframes must be at least 8");
            }
            if !(args.edge_noise >= 0.0) {
                return usage("--edge-noise must be non-negative");
            }
            let cfg = FalseLoopConfig {
                keyframes: args.keyframes,
                edge_noise: args.edge_noise,
                outlier_fraction: args.fraction,
                seed: args.seed,
            };
            noisy_ring_graph(&cfg)?.1
        }
    };
    let run = false_loop_run(
        &graph,
        args.fraction,
        args.solver.into(),
        args.huber_delta,
        args.seed,
    )?;
    let ids = |v: &[usize]| {
        v.iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut w = BufWriter::new(io::stdout().lock());
    writeln!(w, "solver {}", json!(run.solver).as_str().unwrap_or(""))?;
    writeln!(w, "fraction {}", args.fraction)?;
    writeln!(w, "clean_edges {}", run.clean_edges)?;
    writeln!(w, "injected {}", ids(&run.injected))?;
    writeln!(w, "flagged {}", ids(&run.flagged))?;
    writeln!(w, "precision {}", run.precision)?;
    writeln!(w, "recall {}", run.recall)?;
    writeln!(w, "error_vs_clean {}", run.error_vs_clean)?;
    w.flush()?;
    Ok(())
}

fn cmd_posegraph_solve(args: &SolveArgs) -> CliResult {
    if !(args.huber_delta > 0.0) {
        return usage("--huber-delta must be positive");
    }
    if args.robust && matches!(args.solver, SolverArg::L2) {
        return usage("--robust applies to the l1 solver only");
    }
    let (mut graph, stored) = read_pose_graph(open(&args.graph)?)?;
    let init = match (args.warm, &stored) {
        (true, Some(s)) => Some(s),
        (true, None) => return usage("--warm needs SOLUTION lines in the graph file"),
        (false, _) => None,
    };
    let cfg = SolveConfig::default();
    let sol = match args.solver {
        SolverArg::L1 if args.robust => {
            let (sol, _, flagged) =
                solve_robust(&mut graph, init, &OutlierThresholds::default(), &cfg)?;
            let mut err = io::stderr().lock();
            writeln!(err, "flagged {:?}", flagged)?;
            sol
        }
        SolverArg::L1 => solve_l1(&graph, init, &cfg)?.0,
        SolverArg::L2 => solve_l2_baseline(&graph, init, args.huber_delta, &cfg)?.0,
    };
    let mut w = BufWriter::new(io::stdout().lock());
    write_solution(&mut w, &sol)?;
    w.flush()?;
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> CliResult {
    let est = read_trajectory(open(&args.traj)?)?;
    let data = read_tracks(&args.gt)?;
    if data.ground_truth.is_empty() {
        return usage("the track file has no `gt` records");
    }
    let m = compare_trajectories(&est, &data.ground_truth)?;
    let mut w = BufWriter::new(io::stdout().lock());
    if args.json {
        serde_json::to_writer_pretty(&mut w, &m)?;
        writeln!(w)?;
    } else {
        write!(w, "{}", m.to_key_value())?;
    }
    w.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Slam(a) => cmd_slam(a),
        Command::Fig5(a) => cmd_fig5(a),
        Command::Falseloop(a) => cmd_falseloop(a),
        Command::PosegraphSolve(a) => cmd_posegraph_solve(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
