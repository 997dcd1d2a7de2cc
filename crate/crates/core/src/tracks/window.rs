//! Expanding sliding window anchored at a keyframe.
//!
//! A window grows while more than `expand_ratio` of the keyframe's tracks
//! reach the new frame. Otherwise it closes: the new keyframe is the most
//! recent member whose median parallax with the new frame reaches the
//! threshold, the old window is truncated to end at that keyframe, and the new
//! window runs from it through the new frame.

use std::collections::{BTreeMap, BTreeSet};

use super::{FrameId, FrameObservations, TrackData, TrackId};
use crate::error::{Error, Result};
use crate::geometry::Rotation;

#[derive(Clone, Debug, PartialEq)]
pub struct WindowConfig {
    /// Expand only when strictly more than this fraction of keyframe tracks
    /// is present in the new frame.
    pub expand_ratio: f64,
    /// Median-parallax threshold for keyframe selection, radians.
    pub parallax_threshold: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            expand_ratio: 0.3,
            parallax_threshold: 1.15f64.to_radians(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalWindow {
    pub keyframe_id: FrameId,
    /// Ordered; the keyframe comes first.
    pub member_frames: Vec<FrameId>,
    /// Tracks observed in every member frame.
    pub tracks_full: BTreeSet<TrackId>,
    /// Tracks observed in some but not all member frames.
    pub tracks_partial: BTreeSet<TrackId>,
    /// Tracks observed in the keyframe.
    pub keyframe_tracks: BTreeSet<TrackId>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum WindowDecision {
    Expand,
    CloseAndStartNew {
        keyframe: FrameId,
        /// No member reached the parallax threshold; the most recent one was
        /// taken anyway.
        low_parallax: bool,
    },
}

impl LocalWindow {
    pub fn new(keyframe_id: FrameId, keyframe_obs: &FrameObservations) -> Self {
        let tracks: BTreeSet<TrackId> = keyframe_obs.keys().copied().collect();
        LocalWindow {
            keyframe_id,
            member_frames: vec![keyframe_id],
            tracks_full: tracks.clone(),
            tracks_partial: BTreeSet::new(),
            keyframe_tracks: tracks,
        }
    }

    /// Builds a window over `frames` (first is the keyframe) from stored data.
    pub fn from_frames(data: &TrackData, frames: &[FrameId]) -> Self {
        let empty = FrameObservations::new();
        let obs = |f: &FrameId| data.frame(*f).unwrap_or(&empty);
        let mut w = LocalWindow::new(frames[0], obs(&frames[0]));
        for f in &frames[1..] {
            w.push(*f, obs(f));
        }
        w
    }

    pub fn len(&self) -> usize {
        self.member_frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_frames.is_empty()
    }

    pub fn last_frame(&self) -> FrameId {
        *self.member_frames.last().expect("window has a keyframe")
    }

    /// Fraction of keyframe tracks present in `obs`.
    pub fn tracked_ratio(&self, obs: &FrameObservations) -> f64 {
        if self.keyframe_tracks.is_empty() {
            return 0.0;
        }
        let n = self
            .keyframe_tracks
            .iter()
            .filter(|t| obs.contains_key(t))
            .count();
        n as f64 / self.keyframe_tracks.len() as f64
    }

    fn push(&mut self, frame: FrameId, obs: &FrameObservations) {
        let before: BTreeSet<TrackId> = self
            .tracks_full
            .union(&self.tracks_partial)
            .copied()
            .collect();
        self.member_frames.push(frame);
        self.tracks_full.retain(|t| obs.contains_key(t));
        let touching: BTreeSet<TrackId> = before.into_iter().chain(obs.keys().copied()).collect();
        self.tracks_partial = touching.difference(&self.tracks_full).copied().collect();
    }

    /// Splits at `new_keyframe` (a member, or `new_frame` itself): returns the
    /// truncated old window (ending at the new keyframe) and the new window
    /// from the new keyframe through `new_frame`.
    pub fn close_at(
        &self,
        new_keyframe: FrameId,
        new_frame: FrameId,
        data: &TrackData,
    ) -> (LocalWindow, LocalWindow) {
        let pos = self.member_frames.iter().position(|f| *f == new_keyframe);
        let (old, mut new) = match pos {
            Some(p) => (
                self.member_frames[..=p].to_vec(),
                self.member_frames[p..].to_vec(),
            ),
            None => (self.member_frames.clone(), vec![]),
        };
        if new.last() != Some(&new_frame) {
            new.push(new_frame);
        }
        (
            LocalWindow::from_frames(data, &old),
            LocalWindow::from_frames(data, &new),
        )
    }
}

/// Median angle between rotation-compensated bearings of shared tracks.
/// Rotations are world-to-camera.
pub fn median_parallax(
    frame_a: &FrameObservations,
    frame_b: &FrameObservations,
    rot_a: &Rotation,
    rot_b: &Rotation,
) -> Result<f64> {
    let mut angles: Vec<f64> = frame_a
        .iter()
        .filter_map(|(t, oa)| {
            let ob = frame_b.get(t)?;
            let da = oa.bearing.rotated(&rot_a.inverse());
            let db = ob.bearing.rotated(&rot_b.inverse());
            Some(da.angle_to(&db))
        })
        .collect();
    if angles.is_empty() {
        return Err(Error::Degenerate(
            "no shared tracks: parallax undefined".into(),
        ));
    }
    Ok(median(&mut angles))
}

pub(crate) fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Decides whether `frame` extends `window`. On `Expand` the window is
/// updated in place; on close it is left untouched (see [`LocalWindow::close_at`]).
pub fn update_window(
    window: &mut LocalWindow,
    frame: FrameId,
    obs: &FrameObservations,
    data: &TrackData,
    rotations: &BTreeMap<FrameId, Rotation>,
    config: &WindowConfig,
) -> Result<WindowDecision> {
    if window.member_frames.iter().any(|f| *f >= frame) {
        return Err(Error::InvalidInput(format!(
            "frame {frame} is not newer than the window members"
        )));
    }
    if window.tracked_ratio(obs) > config.expand_ratio {
        window.push(frame, obs);
        return Ok(WindowDecision::Expand);
    }

    let rot = |f: FrameId| {
        rotations
            .get(&f)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("no rotation for frame {f}")))
    };
    let rot_new = rot(frame)?;
    let empty = FrameObservations::new();
    for &candidate in window.member_frames[1..].iter().rev() {
        let cand_obs = data.frame(candidate).unwrap_or(&empty);
        match median_parallax(cand_obs, obs, &rot(candidate)?, &rot_new) {
            Ok(p) if p >= config.parallax_threshold => {
                return Ok(WindowDecision::CloseAndStartNew {
                    keyframe: candidate,
                    low_parallax: false,
                })
            }
            _ => {}
        }
    }
    let fallback = if window.len() > 1 {
        window.last_frame()
    } else {
        frame
    };
    Ok(WindowDecision::CloseAndStartNew {
        keyframe: fallback,
        low_parallax: true,
    })
}
