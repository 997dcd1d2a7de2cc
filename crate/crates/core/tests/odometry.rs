use slam_core::error::Error;
use slam_core::rank1::{FactorizeConfig, OdometryConfig, WindowOdometry};
use slam_core::synth::{synthesize, DepthRange, Motion, SceneConfig};
use slam_core::tracks::TrackData;

fn clip(motion: Motion, noise: f64, seed: u64) -> (slam_core::synth::GroundTruth, TrackData) {
    synthesize(&SceneConfig {
        motion,
        depth: DepthRange::Close,
        pixel_noise_sigma: noise,
        n_frames: 10,
        seed,
        ..SceneConfig::default()
    })
    .unwrap()
}

fn run(data: &TrackData, config: &OdometryConfig) -> (WindowOdometry, Vec<bool>) {
    let r0 = data.rotations[&0];
    let mut odo = WindowOdometry::new(0, data.frames[&0].clone());
    let mut converged = vec![];
    for f in 1..data.frames.len() {
        let rep = odo
            .step(
                f,
                &data.frames[&f],
                &(data.rotations[&f] * r0.inverse()),
                config,
            )
            .unwrap();
        converged.push(rep.converged);
    }
    (odo, converged)
}

#[test]
fn noiseless_window_matches_truth_up_to_scale() {
    for motion in [Motion::Forward, Motion::Circular] {
        let (gt, data) = clip(motion, 0.0, 11);
        let (odo, converged) = run(&data, &OdometryConfig::default());
        assert!(converged.iter().all(|c| *c));
        let map = odo.local_map();
        let p0 = &gt.poses[0];
        let s = p0.to_camera(&gt.poses[9].position).norm() / map.positions[9].norm();
        for (i, f) in map.frames.iter().enumerate() {
            let truth = p0.to_camera(&gt.poses[*f].position);
            assert!(
                (map.positions[i] * s - truth).norm() < 1e-6,
                "{motion:?} frame {f}"
            );
        }
    }
}

#[test]
fn truncation_keeps_a_prefix() {
    let (_, data) = clip(Motion::Forward, 1.0, 12);
    let (mut odo, _) = run(&data, &OdometryConfig::default());
    odo.truncate_after(4, &OdometryConfig::default()).unwrap();
    assert_eq!(odo.frames(), &[1, 2, 3, 4]);
    assert_eq!(odo.local_map().positions.len(), 5);
    assert_eq!(odo.matrix().n_frames(), 4);
}

#[test]
fn iteration_cap_fails_unless_lenient() {
    let (_, data) = clip(Motion::Circular, 3.0, 13);
    let strict = OdometryConfig {
        factorize: FactorizeConfig {
            tol: 0.0,
            max_iters: 2,
        },
        ..OdometryConfig::default()
    };
    let mut odo = WindowOdometry::new(0, data.frames[&0].clone());
    let r0 = data.rotations[&0];
    let err = odo.step(
        1,
        &data.frames[&1],
        &(data.rotations[&1] * r0.inverse()),
        &strict,
    );
    assert!(matches!(err, Err(Error::NonConvergence { iters: 2, .. })));
    let lenient = OdometryConfig {
        accept_unconverged: true,
        ..strict
    };
    let (odo, converged) = run(&data, &lenient);
    assert!(converged.iter().all(|c| !*c));
    assert_eq!(odo.local_map().frames.len(), 10);
}
