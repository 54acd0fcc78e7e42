//! g2o pose graphs with `VERTEX_SE3:QUAT` and `EDGE_SE3:QUAT` records.
//!
//! ```text
//! VERTEX_SE3:QUAT id x y z qx qy qz qw
//! EDGE_SE3:QUAT i j x y z qx qy qz qw I11 I12 .. I16 I22 .. I66
//! ```
//!
//! The information block is the row-major upper triangle of a 6x6 matrix.
//! Other record types are skipped with a warning.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use log::warn;
use nalgebra::Matrix6;

use crate::error::{Error, Result};
use crate::lie::{PoseSE3, QuatRotation, Vec3};
use crate::problems::{PgoEdge, PoseGraph};
use crate::trace::ParamSet;

#[derive(Debug, Clone, PartialEq)]
pub struct PoseGraphData {
    /// `(id, pose)` in declaration order; edges index into this list.
    pub vertices: Vec<(usize, PoseSE3)>,
    pub edges: Vec<PgoEdge>,
}

impl PoseGraphData {
    pub fn poses(&self) -> Vec<PoseSE3> {
        self.vertices.iter().map(|v| v.1).collect()
    }

    pub fn model(&self) -> Result<PoseGraph> {
        PoseGraph::new(self.vertices.len(), &self.edges)
    }

    /// Pose group with the first vertex held fixed.
    pub fn params(&self) -> Result<ParamSet> {
        self.model()?.params(&self.poses(), true)
    }

    pub fn with_params(&self, params: &ParamSet) -> PoseGraphData {
        let mut out = self.clone();
        for (v, p) in out.vertices.iter_mut().zip(params.group(0).poses()) {
            v.1 = p;
        }
        out
    }
}

fn parse_fields(line: usize, fields: &[&str], what: &str) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                line,
                message: format!("bad {what} value {f:?}"),
            })
        })
        .collect()
}

fn parse_pose(line: usize, v: &[f64]) -> Result<PoseSE3> {
    let q = QuatRotation::new(v[3], v[4], v[5], v[6]).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })?;
    Ok(PoseSE3::new(q, Vec3::new(v[0], v[1], v[2])))
}

fn parse_id(line: usize, s: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::Parse {
        line,
        message: format!("bad vertex id {s:?}"),
    })
}

pub fn parse_g2o<R: BufRead>(reader: R) -> Result<PoseGraphData> {
    let mut vertices = Vec::new();
    let mut index: HashMap<usize, usize> = HashMap::new();
    let mut raw_edges = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let Some(&tag) = fields.first() else { continue };
        match tag {
            "VERTEX_SE3:QUAT" => {
                if fields.len() != 9 {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("vertex needs 8 fields, found {}", fields.len() - 1),
                    });
                }
                let id = parse_id(line_no, fields[1])?;
                let pose = parse_pose(line_no, &parse_fields(line_no, &fields[2..], "vertex")?)?;
                if index.insert(id, vertices.len()).is_some() {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("duplicate vertex id {id}"),
                    });
                }
                vertices.push((id, pose));
            }
            "EDGE_SE3:QUAT" => {
                if fields.len() != 31 {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("edge needs 30 fields, found {}", fields.len() - 1),
                    });
                }
                let i = parse_id(line_no, fields[1])?;
                let j = parse_id(line_no, fields[2])?;
                let v = parse_fields(line_no, &fields[3..], "edge")?;
                let measurement = parse_pose(line_no, &v[..7])?;
                let mut info = Matrix6::zeros();
                let mut k = 7;
                for r in 0..6 {
                    for c in r..6 {
                        info[(r, c)] = v[k];
                        info[(c, r)] = v[k];
                        k += 1;
                    }
                }
                raw_edges.push((line_no, i, j, measurement, info));
            }
            other => warn!("line {line_no}: skipping unsupported record {other}"),
        }
    }
    let mut edges = Vec::with_capacity(raw_edges.len());
    for (line, i, j, measurement, info) in raw_edges {
        let lookup = |id: usize| {
            index.get(&id).copied().ok_or_else(|| Error::Parse {
                line,
                message: format!("edge references undeclared vertex {id}"),
            })
        };
        let (a, b) = (lookup(i)?, lookup(j)?);
        if a == b {
            return Err(Error::Parse {
                line,
                message: format!("edge connects vertex {i} to itself"),
            });
        }
        edges.push(PgoEdge {
            i: a,
            j: b,
            measurement,
            information: (info != Matrix6::identity()).then_some(info),
        });
    }
    Ok(PoseGraphData { vertices, edges })
}

fn pose_fields(p: &PoseSE3) -> [f64; 7] {
    let t = p.translation;
    let [x, y, z, w] = p.rotation.coords();
    [t.x, t.y, t.z, x, y, z, w]
}

pub fn write_g2o<W: Write>(graph: &PoseGraphData, mut out: W) -> Result<()> {
    for (id, pose) in &graph.vertices {
        write!(out, "VERTEX_SE3:QUAT {id}")?;
        for v in pose_fields(pose) {
            write!(out, " {v}")?;
        }
        writeln!(out)?;
    }
    for e in &graph.edges {
        write!(out, "EDGE_SE3:QUAT {} {}", graph.vertices[e.i].0, graph.vertices[e.j].0)?;
        for v in pose_fields(&e.measurement) {
            write!(out, " {v}")?;
        }
        let info = e.information.unwrap_or_else(Matrix6::identity);
        for r in 0..6 {
            for c in r..6 {
                write!(out, " {}", info[(r, c)])?;
            }
        }
        writeln!(out)?;
    }
    Ok(())
}
