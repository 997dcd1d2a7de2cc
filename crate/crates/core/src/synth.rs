//! Synthetic scenes, trajectories, noisy feature tracks and noisy rotations.
//!
//! All randomness comes from ChaCha8 (`rand_chacha`) seeded with
//! `SceneConfig::seed`; separate ChaCha streams are used for scene layout,
//! pixel noise and rotation noise so that changing one noise level never
//! shifts the others.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{exp_so3, CameraPose, Intrinsics, Rotation, Vec2, Vec3};
use crate::tracks::{FrameId, Observation, TrackData, TrackId};

const STREAM_SCENE: u64 = 0;
const STREAM_PIXELS: u64 = 1;
const STREAM_ROTATIONS: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Circular,
    Forward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthRange {
    /// Depths in `[5, 10]`.
    Close,
    /// Depths in `[10, 15]`.
    Far,
}

impl DepthRange {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            DepthRange::Close => (5.0, 10.0),
            DepthRange::Far => (10.0, 15.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub motion: Motion,
    pub depth: DepthRange,
    pub n_frames: usize,
    pub camera_interval: f64,
    pub hfov_deg: f64,
    pub width: u32,
    pub height: u32,
    pub n_points: usize,
    pub pixel_noise_sigma: f64,
    pub rotation_noise_deg: f64,
    /// Optional visibility cone: each point gets a random surface normal and
    /// is observed only while the viewing direction is within this angle of
    /// it. `None` disables the test.
    pub view_cone_deg: Option<f64>,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            motion: Motion::Forward,
            depth: DepthRange::Far,
            n_frames: 30,
            camera_interval: 0.05,
            hfov_deg: 60.0,
            width: 800,
            height: 600,
            n_points: 200,
            pixel_noise_sigma: 3.0,
            rotation_noise_deg: 0.0,
            view_cone_deg: None,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if self.n_frames < 2 {
            return bad("n_frames must be at least 2");
        }
        if !(self.camera_interval > 0.0) {
            return bad("camera_interval must be positive");
        }
        if !(self.pixel_noise_sigma >= 0.0) {
            return bad("pixel noise sigma must be non-negative");
        }
        if !(self.rotation_noise_deg >= 0.0) {
            return bad("rotation noise must be non-negative");
        }
        if !(self.hfov_deg > 0.0 && self.hfov_deg < 180.0) {
            return bad("hfov must be in (0, 180) degrees");
        }
        if self.n_points == 0 {
            return bad("n_points must be positive");
        }
        if let Some(c) = self.view_cone_deg {
            if !(c > 0.0) {
                return bad("view cone must be positive");
            }
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::from_hfov(self.hfov_deg, self.width, self.height)
    }
}

/// Exact scene: per-frame poses and world points.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub poses: Vec<CameraPose>,
    pub points: Vec<Vec3>,
    /// Surface normals, present when a view cone is configured.
    pub normals: Option<Vec<Vec3>>,
}

impl GroundTruth {
    pub fn centroid(&self) -> Vec3 {
        self.points.iter().sum::<Vec3>() / self.points.len() as f64
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

pub fn generate_scene(config: &SceneConfig) -> Result<GroundTruth> {
    config.validate()?;
    let k = config.intrinsics()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(STREAM_SCENE);

    let (zmin, zmax) = config.depth.bounds();
    let points: Vec<Vec3> = (0..config.n_points)
        .map(|_| {
            let u = rng.random_range(0.0..k.width as f64);
            let v = rng.random_range(0.0..k.height as f64);
            let z = rng.random_range(zmin..=zmax);
            Vec3::new((u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z)
        })
        .collect();
    let normals = config.view_cone_deg.map(|_| {
        (0..config.n_points)
            .map(|_| random_unit(&mut rng))
            .collect::<Vec<_>>()
    });

    let centroid = points.iter().sum::<Vec3>() / points.len() as f64;
    let poses = match config.motion {
        Motion::Forward => {
            let dir = centroid / centroid.norm();
            (0..config.n_frames)
                .map(|j| {
                    CameraPose::new(
                        Rotation::identity(),
                        dir * (j as f64 * config.camera_interval),
                    )
                })
                .collect()
        }
        Motion::Circular => circular_poses(centroid, config.n_frames, config.camera_interval),
    };

    Ok(GroundTruth {
        poses,
        points,
        normals,
    })
}

/// Orbit through the origin around `center`, fixating it. The orbit plane
/// contains the line of sight to `center` and the camera x axis.
fn circular_poses(center: Vec3, n_frames: usize, interval: f64) -> Vec<CameraPose> {
    let radius = center.norm();
    let u = -center / radius;
    let w = {
        let a = Vec3::x() - u * u.dot(&Vec3::x());
        a / a.norm()
    };
    let axis = u.cross(&w);
    let step = 2.0 * (interval / (2.0 * radius)).asin();
    (0..n_frames)
        .map(|j| {
            let orbit = exp_so3(&(axis * (step * j as f64)));
            let position = center + orbit.rotate(&(-center));
            CameraPose::new(orbit.inverse(), position)
        })
        .collect()
}

/// Cosine of the view cone, or `None` when the cone test is disabled.
fn cone_cos(config: &SceneConfig) -> Option<f64> {
    config
        .view_cone_deg
        .filter(|c| *c < 180.0)
        .map(|c| c.to_radians().cos())
}

/// Exact pixel of point `k` in frame `pose`, if it is visible.
pub fn visible_projection(
    gt: &GroundTruth,
    config: &SceneConfig,
    k: &Intrinsics,
    pose: &CameraPose,
    point: usize,
) -> Option<Vec2> {
    let x = &gt.points[point];
    let xc = pose.to_camera(x);
    if xc.z <= 0.0 {
        return None;
    }
    let px = k.project(&xc).ok()?;
    if !k.contains(&px) {
        return None;
    }
    if let (Some(cos), Some(normals)) = (cone_cos(config), gt.normals.as_ref()) {
        let to_cam = (pose.position - x).normalize();
        if to_cam.dot(&normals[point]) < cos {
            return None;
        }
    }
    Some(px)
}

/// Per-frame noisy observations of every visible point. Track id = point index.
pub fn generate_tracks(gt: &GroundTruth, config: &SceneConfig) -> Result<TrackData> {
    config.validate()?;
    let k = config.intrinsics()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(STREAM_PIXELS);
    let noise = Normal::new(0.0, config.pixel_noise_sigma)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;

    let mut data = TrackData::new(k);
    for (frame, pose) in gt.poses.iter().enumerate() {
        let mut obs: BTreeMap<TrackId, Observation> = BTreeMap::new();
        for point in 0..gt.points.len() {
            let Some(px) = visible_projection(gt, config, &k, pose, point) else {
                continue;
            };
            let noisy = if config.pixel_noise_sigma > 0.0 {
                px + Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng))
            } else {
                px
            };
            obs.insert(point, Observation::new(&k, noisy));
        }
        data.frames.insert(frame, obs);
    }
    Ok(data)
}

/// Composes each ground-truth rotation with a random rotation whose angle is
/// `|N(0, noise_deg)|` degrees about a uniformly random axis.
pub fn perturb_rotations(
    gt: &GroundTruth,
    rotation_noise_deg: f64,
    seed: u64,
) -> Result<Vec<Rotation>> {
    if !(rotation_noise_deg >= 0.0) {
        return Err(Error::InvalidInput(
            "rotation noise must be non-negative".into(),
        ));
    }
    if rotation_noise_deg == 0.0 {
        return Ok(gt.poses.iter().map(|p| p.rotation).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_ROTATIONS);
    let sigma = rotation_noise_deg.to_radians();
    Ok(gt
        .poses
        .iter()
        .map(|p| {
            let axis = random_unit(&mut rng);
            let n: f64 = StandardNormal.sample(&mut rng);
            exp_so3(&(axis * (n.abs() * sigma))) * p.rotation
        })
        .collect())
}

/// Scene, tracks, `rot` and `gt` records in one go.
pub fn synthesize(config: &SceneConfig) -> Result<(GroundTruth, TrackData)> {
    let gt = generate_scene(config)?;
    let mut data = generate_tracks(&gt, config)?;
    let rotations = perturb_rotations(&gt, config.rotation_noise_deg, config.seed)?;
    for (frame, r) in rotations.into_iter().enumerate() {
        data.rotations.insert(frame as FrameId, r);
    }
    for (frame, pose) in gt.poses.iter().enumerate() {
        data.ground_truth.insert(frame as FrameId, *pose);
    }
    Ok((gt, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(motion: Motion, depth: DepthRange) -> SceneConfig {
        SceneConfig {
            motion,
            depth,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn forward_spacing_and_depths() {
        let mut c = cfg(Motion::Forward, DepthRange::Close);
        c.n_frames = 2;
        let gt = generate_scene(&c).unwrap();
        assert!(((gt.poses[1].position - gt.poses[0].position).norm() - 0.05).abs() < 1e-15);
        assert_eq!(gt.poses[0], CameraPose::identity());
        for p in &gt.points {
            assert!(p.z >= 5.0 && p.z <= 10.0);
        }
        let k = c.intrinsics().unwrap();
        for p in &gt.points {
            assert!(k.contains(&k.project(p).unwrap()));
        }
    }

    #[test]
    fn circular_orbit_geometry() {
        let c = cfg(Motion::Circular, DepthRange::Far);
        let gt = generate_scene(&c).unwrap();
        let centroid = gt.centroid();
        let r = centroid.norm();
        assert_eq!(gt.poses[0].rotation, Rotation::identity());
        assert!(gt.poses[0].position.norm() < 1e-12);
        let k = c.intrinsics().unwrap();
        let px0 = gt.poses[0].project(&k, &centroid).unwrap();
        for w in gt.poses.windows(2) {
            assert!(((w[1].position - w[0].position).norm() - 0.05).abs() < 1e-12);
        }
        for p in &gt.poses {
            assert!(((p.position - centroid).norm() - r).abs() < 1e-9);
            // fixation: the centroid stays at the same pixel
            assert!((p.project(&k, &centroid).unwrap() - px0).norm() < 1e-6);
        }
        for p in &gt.points {
            assert!(p.z >= 10.0 && p.z <= 15.0);
        }
    }

    #[test]
    fn deterministic() {
        let c = cfg(Motion::Circular, DepthRange::Close);
        assert_eq!(synthesize(&c).unwrap(), synthesize(&c).unwrap());
    }

    #[test]
    fn zero_noise_is_exact_projection() {
        let mut c = cfg(Motion::Forward, DepthRange::Far);
        c.pixel_noise_sigma = 0.0;
        let gt = generate_scene(&c).unwrap();
        let data = generate_tracks(&gt, &c).unwrap();
        let k = c.intrinsics().unwrap();
        for (f, obs) in &data.frames {
            for (t, o) in obs {
                let exact = gt.poses[*f].project(&k, &gt.points[*t]).unwrap();
                assert!((o.pixel - exact).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn pixel_noise_statistics() {
        let mut c = cfg(Motion::Circular, DepthRange::Close);
        c.n_points = 400;
        let gt = generate_scene(&c).unwrap();
        let data = generate_tracks(&gt, &c).unwrap();
        let k = c.intrinsics().unwrap();
        let mut sq = 0.0;
        let mut n = 0usize;
        for (f, obs) in &data.frames {
            for (t, o) in obs {
                let exact = gt.poses[*f].project(&k, &gt.points[*t]).unwrap();
                let d = o.pixel - exact;
                sq += d.x * d.x + d.y * d.y;
                n += 2;
                // every emitted observation lies within 5 sigma of the truth
                assert!(d.norm() < 5.0 * 3.0 * 2f64.sqrt());
            }
        }
        assert!(n >= 10_000);
        let std = (sq / n as f64).sqrt();
        assert!((std - 3.0).abs() < 0.15, "std {std}");
    }

    #[test]
    fn points_behind_camera_are_not_observed() {
        let gt = GroundTruth {
            poses: vec![
                CameraPose::identity(),
                CameraPose::new(Rotation::identity(), Vec3::new(0.0, 0.0, 20.0)),
            ],
            points: vec![Vec3::new(0.0, 0.0, 10.0)],
            normals: None,
        };
        let mut c = cfg(Motion::Forward, DepthRange::Close);
        c.pixel_noise_sigma = 0.0;
        let data = generate_tracks(&gt, &c).unwrap();
        assert_eq!(data.frames[&0].len(), 1);
        assert!(data.frames[&1].is_empty());
    }

    #[test]
    fn rotation_noise_statistics() {
        let c = cfg(Motion::Forward, DepthRange::Far);
        let mut gt = generate_scene(&c).unwrap();
        assert_eq!(
            perturb_rotations(&gt, 0.0, 3).unwrap(),
            gt.poses.iter().map(|p| p.rotation).collect::<Vec<_>>()
        );
        gt.poses = vec![CameraPose::identity(); 10_000];
        let noisy = perturb_rotations(&gt, 1.0, 3).unwrap();
        assert_eq!(noisy, perturb_rotations(&gt, 1.0, 3).unwrap());
        let mean = noisy.iter().map(|r| r.angle().to_degrees()).sum::<f64>() / noisy.len() as f64;
        let expected = (2.0 / std::f64::consts::PI).sqrt();
        assert!((mean - expected).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn view_cone_limits_visibility() {
        let mut c = cfg(Motion::Circular, DepthRange::Close);
        c.view_cone_deg = Some(60.0);
        c.n_points = 500;
        let (_, data) = synthesize(&c).unwrap();
        let seen = data.frames[&0].len();
        assert!(seen > 50 && seen < 300, "{seen}");
    }

    #[test]
    fn invalid_configs() {
        let c = SceneConfig {
            pixel_noise_sigma: -1.0,
            ..SceneConfig::default()
        };
        assert!(generate_scene(&c).is_err());
        let c = SceneConfig {
            n_frames: 1,
            ..SceneConfig::default()
        };
        assert!(generate_scene(&c).is_err());
    }
}
