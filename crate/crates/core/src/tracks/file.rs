//! Line-oriented track file.
//!
//! ```text
//! intrinsics <fx> <fy> <cx> <cy> <width> <height>
//! obs <frame_id> <track_id> <x_px> <y_px>
//! rot <frame_id> <qw> <qx> <qy> <qz>
//! gt <frame_id> <qw> <qx> <qy> <qz> <cx> <cy> <cz>
//! ```
//!
//! `#` starts a comment. The intrinsics record must be the first record.

use std::collections::btree_map::Entry;
use std::io::{BufRead, Write};
use std::str::{FromStr, SplitWhitespace};

use super::{Observation, TrackData};
use crate::error::{Error, Result};
use crate::geometry::{CameraPose, Intrinsics, Rotation, Vec2, Vec3};

struct Fields<'a> {
    line: usize,
    it: SplitWhitespace<'a>,
}

impl<'a> Fields<'a> {
    fn next<T: FromStr>(&mut self, what: &str) -> Result<T> {
        let tok = self
            .it
            .next()
            .ok_or_else(|| Error::parse(self.line, format!("missing field `{what}`")))?;
        tok.parse::<T>()
            .map_err(|_| Error::parse(self.line, format!("bad value `{tok}` for `{what}`")))
    }

    fn finite(&mut self, what: &str) -> Result<f64> {
        let v: f64 = self.next(what)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::parse(self.line, format!("non-finite `{what}`")))
        }
    }

    fn rotation(&mut self) -> Result<Rotation> {
        let w = self.finite("qw")?;
        let x = self.finite("qx")?;
        let y = self.finite("qy")?;
        let z = self.finite("qz")?;
        Rotation::from_wxyz(w, x, y, z).map_err(|e| Error::parse(self.line, e.to_string()))
    }

    fn end(mut self) -> Result<()> {
        match self.it.next() {
            None => Ok(()),
            Some(t) => Err(Error::parse(
                self.line,
                format!("unexpected trailing field `{t}`"),
            )),
        }
    }
}

pub fn read_track_file(reader: impl BufRead) -> Result<TrackData> {
    let mut data: Option<TrackData> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let content = line.split('#').next().unwrap_or("");
        let mut it = content.split_whitespace();
        let Some(kind) = it.next() else { continue };
        let mut f = Fields { line: line_no, it };

        let Some(d) = data.as_mut() else {
            if kind != "intrinsics" {
                return Err(Error::MissingIntrinsics);
            }
            let fx = f.finite("fx")?;
            let fy = f.finite("fy")?;
            let cx = f.finite("cx")?;
            let cy = f.finite("cy")?;
            let w: u32 = f.next("width")?;
            let h: u32 = f.next("height")?;
            f.end()?;
            let k = Intrinsics::new(fx, fy, cx, cy, w, h)
                .map_err(|e| Error::parse(line_no, e.to_string()))?;
            data = Some(TrackData::new(k));
            continue;
        };

        match kind {
            "intrinsics" => return Err(Error::parse(line_no, "duplicate intrinsics record")),
            "obs" => {
                let frame: usize = f.next("frame_id")?;
                let track: usize = f.next("track_id")?;
                let x = f.finite("x_px")?;
                let y = f.finite("y_px")?;
                f.end()?;
                let obs = Observation::new(&d.intrinsics, Vec2::new(x, y));
                match d.frames.entry(frame).or_default().entry(track) {
                    Entry::Occupied(_) => {
                        return Err(Error::parse(
                            line_no,
                            format!("duplicate observation of track {track} in frame {frame}"),
                        ))
                    }
                    Entry::Vacant(v) => {
                        v.insert(obs);
                    }
                }
            }
            "rot" => {
                let frame: usize = f.next("frame_id")?;
                let r = f.rotation()?;
                f.end()?;
                if d.rotations.insert(frame, r).is_some() {
                    return Err(Error::parse(
                        line_no,
                        format!("duplicate rot for frame {frame}"),
                    ));
                }
            }
            "gt" => {
                let frame: usize = f.next("frame_id")?;
                let r = f.rotation()?;
                let c = Vec3::new(f.finite("cx")?, f.finite("cy")?, f.finite("cz")?);
                f.end()?;
                if d.ground_truth
                    .insert(frame, CameraPose::new(r, c))
                    .is_some()
                {
                    return Err(Error::parse(
                        line_no,
                        format!("duplicate gt for frame {frame}"),
                    ));
                }
            }
            other => {
                return Err(Error::parse(
                    line_no,
                    format!("unknown record type `{other}`"),
                ))
            }
        }
    }
    data.ok_or(Error::MissingIntrinsics)
}

pub fn write_track_file(mut w: impl Write, data: &TrackData) -> Result<()> {
    let k = &data.intrinsics;
    writeln!(
        w,
        "# track file: intrinsics, then per frame rot/gt/obs records"
    )?;
    writeln!(
        w,
        "intrinsics {} {} {} {} {} {}",
        k.fx, k.fy, k.cx, k.cy, k.width, k.height
    )?;
    let mut frames: Vec<usize> = data
        .frames
        .keys()
        .chain(data.rotations.keys())
        .chain(data.ground_truth.keys())
        .copied()
        .collect();
    frames.sort_unstable();
    frames.dedup();
    for f in frames {
        if let Some(r) = data.rotations.get(&f) {
            let [qw, qx, qy, qz] = r.wxyz();
            writeln!(w, "rot {f} {qw} {qx} {qy} {qz}")?;
        }
        if let Some(p) = data.ground_truth.get(&f) {
            let [qw, qx, qy, qz] = p.rotation.wxyz();
            let c = p.position;
            writeln!(w, "gt {f} {qw} {qx} {qy} {qz} {} {} {}", c.x, c.y, c.z)?;
        }
        if let Some(obs) = data.frames.get(&f) {
            for (t, o) in obs {
                writeln!(w, "obs {f} {t} {} {}", o.pixel.x, o.pixel.y)?;
            }
        }
    }
    Ok(())
}
