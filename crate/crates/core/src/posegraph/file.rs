//! Line-oriented pose-graph file.
//!
//! ```text
//! KF <id>
//! EDGE <from> <to> <D|E|L> <s> <qw> <qx> <qy> <qz> <cx> <cy> <cz>
//! SOLUTION <id> <s> <qw> <qx> <qy> <qz> <cx> <cy> <cz>
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use super::{EdgeKind, GlobalPose, GlobalPoses, KeyframeId, PoseGraph, Sim3Edge};
use crate::error::{Error, Result};
use crate::geometry::{Rotation, Vec3};

fn field<T: std::str::FromStr>(
    it: &mut std::str::SplitWhitespace,
    line: usize,
    what: &str,
) -> Result<T> {
    let tok = it
        .next()
        .ok_or_else(|| Error::parse(line, format!("missing field `{what}`")))?;
    tok.parse()
        .map_err(|_| Error::parse(line, format!("bad value `{tok}` for `{what}`")))
}

fn finite(it: &mut std::str::SplitWhitespace, line: usize, what: &str) -> Result<f64> {
    let v: f64 = field(it, line, what)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::parse(line, format!("non-finite `{what}`")))
    }
}

fn sim_fields(it: &mut std::str::SplitWhitespace, line: usize) -> Result<(f64, Rotation, Vec3)> {
    let s = finite(it, line, "s")?;
    if s <= 0.0 {
        return Err(Error::parse(line, format!("scale {s} must be positive")));
    }
    let q = [
        finite(it, line, "qw")?,
        finite(it, line, "qx")?,
        finite(it, line, "qy")?,
        finite(it, line, "qz")?,
    ];
    let r = Rotation::from_wxyz(q[0], q[1], q[2], q[3])
        .map_err(|e| Error::parse(line, e.to_string()))?;
    let c = Vec3::new(
        finite(it, line, "cx")?,
        finite(it, line, "cy")?,
        finite(it, line, "cz")?,
    );
    Ok((s, r, c))
}

/// Reads a graph and, when present, a solution.
pub fn read_pose_graph(reader: impl BufRead) -> Result<(PoseGraph, Option<GlobalPoses>)> {
    let mut graph = PoseGraph::new();
    let mut solution: BTreeMap<KeyframeId, GlobalPose> = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let n = idx + 1;
        let line = line?;
        let content = line.split('#').next().unwrap_or("");
        let mut it = content.split_whitespace();
        let Some(kind) = it.next() else { continue };
        match kind {
            "KF" => {
                let id: KeyframeId = field(&mut it, n, "id")?;
                graph.add_keyframe(id);
            }
            "EDGE" => {
                let from: KeyframeId = field(&mut it, n, "from")?;
                let to: KeyframeId = field(&mut it, n, "to")?;
                let k: String = field(&mut it, n, "kind")?;
                let kind = EdgeKind::from_letter(&k)
                    .ok_or_else(|| Error::parse(n, format!("edge kind `{k}` is not D, E or L")))?;
                let (s, r, c) = sim_fields(&mut it, n)?;
                let e = Sim3Edge::new(from, to, s, r, c, kind)
                    .map_err(|e| Error::parse(n, e.to_string()))?;
                graph.add_edge(e);
            }
            "SOLUTION" => {
                let id: KeyframeId = field(&mut it, n, "id")?;
                let (s, r, c) = sim_fields(&mut it, n)?;
                if solution
                    .insert(
                        id,
                        GlobalPose {
                            scale: s,
                            rotation: r,
                            position: c,
                        },
                    )
                    .is_some()
                {
                    return Err(Error::parse(
                        n,
                        format!("duplicate solution for keyframe {id}"),
                    ));
                }
            }
            other => return Err(Error::parse(n, format!("unknown record type `{other}`"))),
        }
        if let Some(t) = it.next() {
            return Err(Error::parse(n, format!("unexpected trailing field `{t}`")));
        }
    }
    let solution = if solution.is_empty() {
        None
    } else {
        let gauge = *solution.keys().next().expect("non-empty");
        Some(GlobalPoses {
            gauge,
            poses: solution,
        })
    };
    Ok((graph, solution))
}

fn sim_text(s: f64, r: &Rotation, c: &Vec3) -> String {
    let [qw, qx, qy, qz] = r.wxyz();
    format!("{s} {qw} {qx} {qy} {qz} {} {} {}", c.x, c.y, c.z)
}

/// Writes `KF` and `EDGE` records (edges flagged as outliers are written as
/// comments) followed by the solution, if any.
pub fn write_pose_graph(
    mut w: impl Write,
    graph: &PoseGraph,
    solution: Option<&GlobalPoses>,
) -> Result<()> {
    for k in &graph.keyframes {
        writeln!(w, "KF {k}")?;
    }
    for e in &graph.edges {
        let prefix = if e.outlier { "# outlier " } else { "" };
        writeln!(
            w,
            "{prefix}EDGE {} {} {} {}",
            e.from,
            e.to,
            e.kind.letter(),
            sim_text(e.scale, &e.rotation, &e.position)
        )?;
    }
    if let Some(s) = solution {
        write_solution(w, s)?;
    }
    Ok(())
}

pub fn write_solution(mut w: impl Write, solution: &GlobalPoses) -> Result<()> {
    for (k, p) in &solution.poses {
        writeln!(
            w,
            "SOLUTION {k} {}",
            sim_text(p.scale, &p.rotation, &p.position)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::exp_so3;

    #[test]
    fn round_trip() {
        let mut g = PoseGraph::new();
        g.add_keyframe(7);
        g.add_edge(
            Sim3Edge::new(
                0,
                1,
                1.5,
                exp_so3(&Vec3::new(0.1, -0.2, 0.3)),
                Vec3::new(1.0, 2.0, -3.5),
                EdgeKind::Direct,
            )
            .unwrap(),
        );
        g.add_edge(
            Sim3Edge::new(
                0,
                2,
                0.25,
                exp_so3(&Vec3::new(0.0, 0.2, 0.0)),
                Vec3::new(0.5, 0.0, 1e-9),
                EdgeKind::Loop,
            )
            .unwrap(),
        );
        let sol = GlobalPoses {
            gauge: 0,
            poses: BTreeMap::from([
                (0, GlobalPose::gauge()),
                (
                    1,
                    GlobalPose {
                        scale: 2.0,
                        rotation: exp_so3(&Vec3::new(0.3, 0.0, 0.0)),
                        position: Vec3::new(1.0, 0.0, 0.0),
                    },
                ),
            ]),
        };
        let mut buf = Vec::new();
        write_pose_graph(&mut buf, &g, Some(&sol)).unwrap();
        let (back, bsol) = read_pose_graph(buf.as_slice()).unwrap();
        assert_eq!(back.keyframes, g.keyframes);
        assert_eq!(back.edges.len(), 2);
        for (a, b) in back.edges.iter().zip(&g.edges) {
            assert_eq!(
                (a.from, a.to, a.kind, a.scale, a.position),
                (b.from, b.to, b.kind, b.scale, b.position)
            );
            assert!(a.rotation.angle_to(&b.rotation) < 1e-15);
        }
        assert_eq!(bsol.unwrap().poses.len(), 2);
        let mut again = Vec::new();
        write_pose_graph(&mut again, &back, None).unwrap();
        let text = String::from_utf8(again).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with(&text));
    }

    #[test]
    fn errors() {
        let cases = [
            ("KF x\n", 1),
            ("KF 1\nEDGE 0 1 X 1 1 0 0 0 0 0 0\n", 2),
            ("EDGE 0 1 D -1 1 0 0 0 0 0 0\n", 1),
            ("EDGE 0 1 D 1 1 0 0 0.1 0 0 0\n", 1),
            ("EDGE 0 0 D 1 1 0 0 0 0 0 0\n", 1),
            ("\n#c\nEDGE 0 1 D 1 1 0 0 0 0 0\n", 3),
            ("SOLUTION 0 1 1 0 0 0 0 0 0 9\n", 1),
            ("VERTEX 0\n", 1),
            (
                "SOLUTION 0 1 1 0 0 0 0 0 0\nSOLUTION 0 1 1 0 0 0 0 0 0\n",
                2,
            ),
        ];
        for (s, want) in cases {
            match read_pose_graph(s.as_bytes()) {
                Err(Error::Parse { line, .. }) => assert_eq!(line, want, "{s}"),
                other => panic!("{s}: {other:?}"),
            }
        }
    }

    #[test]
    fn quaternion_normalized() {
        let (g, _) = read_pose_graph("EDGE 0 1 E 1 1.0000005 0 0 0 0 0 0\n".as_bytes()).unwrap();
        assert!((g.edges[0].rotation.quaternion().norm() - 1.0).abs() < 1e-15);
        assert_eq!(g.edges[0].kind, EdgeKind::Extended);
    }
}
