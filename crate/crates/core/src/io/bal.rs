//! Bundle Adjustment in the Large text format.
//!
//! ```text
//! <num_cameras> <num_points> <num_observations>
//! <camera_index> <point_index> <x> <y>        (num_observations times)
//! <r1> <r2> <r3> <t1> <t2> <t3> <f> <k1> <k2> (per camera, Rodrigues rotation)
//! <X> <Y> <Z>                                 (per point)
//! ```
//!
//! Any run of whitespace separates tokens.

use std::io::{BufRead, Write};

use super::tokens::Tokens;
use crate::error::{Error, Result};
use crate::lie::{PoseSE3, QuatRotation, Vec3};
use crate::problems::{BalIntrinsics, BundleAdjustment, CameraModel, Observation};
use crate::trace::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalCamera {
    /// World-to-camera transform.
    pub pose: PoseSE3,
    pub intrinsics: BalIntrinsics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalProblem {
    pub cameras: Vec<BalCamera>,
    pub points: Vec<Vec3>,
    pub observations: Vec<Observation>,
}

impl BalProblem {
    pub fn poses(&self) -> Vec<PoseSE3> {
        self.cameras.iter().map(|c| c.pose).collect()
    }

    pub fn intrinsics(&self) -> Vec<BalIntrinsics> {
        self.cameras.iter().map(|c| c.intrinsics).collect()
    }

    /// Residual model with each camera's intrinsics held fixed.
    pub fn model(&self) -> Result<BundleAdjustment> {
        BundleAdjustment::new(
            CameraModel::Bal(self.intrinsics()),
            self.cameras.len(),
            self.points.len(),
            &self.observations,
        )
    }

    pub fn params(&self) -> Result<ParamSet> {
        let mut ps = ParamSet::new();
        ps.add_poses(&self.poses())?;
        ps.add_points(&self.points)?;
        Ok(ps)
    }

    /// Copy with poses and points taken from an optimized parameter set.
    pub fn with_params(&self, params: &ParamSet) -> BalProblem {
        let mut out = self.clone();
        for (cam, pose) in out.cameras.iter_mut().zip(params.group(0).poses()) {
            cam.pose = pose;
        }
        out.points = params.group(1).points();
        out
    }
}

pub fn parse_bal<R: BufRead>(reader: R) -> Result<BalProblem> {
    let mut t = Tokens::new(reader);
    let nc: usize = t.expect("camera count")?;
    let np: usize = t.expect("point count")?;
    let no: usize = t.expect("observation count")?;
    if nc == 0 || np == 0 {
        return Err(t.error("a BAL problem needs at least one camera and one point"));
    }

    let mut observations = Vec::with_capacity(no);
    for _ in 0..no {
        let camera_index: usize = t.expect("camera index")?;
        let point_index: usize = t.expect("point index")?;
        if camera_index >= nc {
            return Err(t.error(format!("camera index {camera_index} out of range ({nc} cameras)")));
        }
        if point_index >= np {
            return Err(t.error(format!("point index {point_index} out of range ({np} points)")));
        }
        let x: f64 = t.expect("pixel x")?;
        let y: f64 = t.expect("pixel y")?;
        observations.push(Observation {
            camera_index,
            point_index,
            pixel: [x, y],
        });
    }

    let mut cameras = Vec::with_capacity(nc);
    for _ in 0..nc {
        let mut v = [0.0f64; 9];
        for (i, slot) in v.iter_mut().enumerate() {
            *slot = t.expect(&format!("camera parameter {i}"))?;
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(t.error("non-finite camera parameter"));
        }
        let rotation = QuatRotation::exp(&Vec3::new(v[0], v[1], v[2]));
        let intrinsics = BalIntrinsics::new(v[6], v[7], v[8]).map_err(|e| t.error(e.to_string()))?;
        cameras.push(BalCamera {
            pose: PoseSE3::new(rotation, Vec3::new(v[3], v[4], v[5])),
            intrinsics,
        });
    }

    let mut points = Vec::with_capacity(np);
    for _ in 0..np {
        let x: f64 = t.expect("point x")?;
        let y: f64 = t.expect("point y")?;
        let z: f64 = t.expect("point z")?;
        points.push(Vec3::new(x, y, z));
    }
    if let Some(extra) = t.next_token()? {
        return Err(Error::Parse {
            line: t.line(),
            message: format!("trailing data {extra:?} after the last point"),
        });
    }
    Ok(BalProblem {
        cameras,
        points,
        observations,
    })
}

/// Writes `problem` in the layout of the original dataset files, one scalar
/// per line for camera and point blocks.
pub fn write_bal<W: Write>(problem: &BalProblem, mut out: W) -> Result<()> {
    writeln!(
        out,
        "{} {} {}",
        problem.cameras.len(),
        problem.points.len(),
        problem.observations.len()
    )?;
    for o in &problem.observations {
        writeln!(out, "{} {} {:e} {:e}", o.camera_index, o.point_index, o.pixel[0], o.pixel[1])?;
    }
    for c in &problem.cameras {
        let r = c.pose.rotation.log();
        let t = c.pose.translation;
        let k = c.intrinsics;
        for v in [r.x, r.y, r.z, t.x, t.y, t.z, k.f, k.k1, k.k2] {
            writeln!(out, "{v:e}")?;
        }
    }
    for p in &problem.points {
        for v in [p.x, p.y, p.z] {
            writeln!(out, "{v:e}")?;
        }
    }
    Ok(())
}
