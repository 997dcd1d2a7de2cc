//! Feature tracks: ingestion of track files and the keyframe window manager.

mod file;
mod window;

use std::collections::BTreeMap;

pub use file::{read_track_file, write_track_file};
pub(crate) use window::median;
pub use window::{median_parallax, update_window, LocalWindow, WindowConfig, WindowDecision};

use crate::geometry::{CameraPose, Intrinsics, Rotation, UnitBearing, Vec2};

pub type FrameId = usize;
pub type TrackId = usize;

/// A pixel measurement with its cached unit bearing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub pixel: Vec2,
    pub bearing: UnitBearing,
}

impl Observation {
    pub fn new(k: &Intrinsics, pixel: Vec2) -> Self {
        Observation {
            pixel,
            bearing: k.pixel_to_bearing(&pixel),
        }
    }
}

pub type FrameObservations = BTreeMap<TrackId, Observation>;

/// One track across frames. Frame ids are ordered by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTrack {
    pub track_id: TrackId,
    pub observations: BTreeMap<FrameId, Observation>,
}

/// Everything a track file carries.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackData {
    pub intrinsics: Intrinsics,
    pub frames: BTreeMap<FrameId, FrameObservations>,
    /// World-to-camera rotations supplied with the data (IMU or external).
    pub rotations: BTreeMap<FrameId, Rotation>,
    pub ground_truth: BTreeMap<FrameId, CameraPose>,
}

impl TrackData {
    pub fn new(intrinsics: Intrinsics) -> Self {
        TrackData {
            intrinsics,
            frames: BTreeMap::new(),
            rotations: BTreeMap::new(),
            ground_truth: BTreeMap::new(),
        }
    }

    pub fn frame(&self, id: FrameId) -> Option<&FrameObservations> {
        self.frames.get(&id)
    }

    /// Track-major view of the observations.
    pub fn tracks(&self) -> BTreeMap<TrackId, FeatureTrack> {
        let mut out: BTreeMap<TrackId, FeatureTrack> = BTreeMap::new();
        for (&frame, obs) in &self.frames {
            for (&track, o) in obs {
                out.entry(track)
                    .or_insert_with(|| FeatureTrack {
                        track_id: track,
                        observations: BTreeMap::new(),
                    })
                    .observations
                    .insert(frame, *o);
            }
        }
        out
    }

    pub fn observation_count(&self) -> usize {
        self.frames.values().map(|f| f.len()).sum()
    }
}
