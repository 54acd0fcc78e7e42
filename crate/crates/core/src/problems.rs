//! Residual models for bundle adjustment and pose-graph optimization.

use std::sync::Arc;

use nalgebra::{Matrix6, SymmetricEigen};

use crate::error::{invalid, Error, Result};
use crate::lie::{PoseSE3, Vec3};
use crate::trace::{
    ParamSet, ResidualModel, TraceGraph, Traced, ValueKind, BAL_MIN_DEPTH, PINHOLE_MIN_DEPTH,
};

/// Shared pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pinhole {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Pinhole {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() || !fx.is_finite() || !fy.is_finite() {
            return Err(invalid(format!("bad pinhole intrinsics fx={fx} fy={fy} cx={cx} cy={cy}")));
        }
        Ok(Self { fx, fy, cx, cy })
    }
}

/// BAL camera intrinsics: focal length and two radial coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalIntrinsics {
    pub f: f64,
    pub k1: f64,
    pub k2: f64,
}

impl BalIntrinsics {
    pub fn new(f: f64, k1: f64, k2: f64) -> Result<Self> {
        if !(f > 0.0) || !f.is_finite() || !k1.is_finite() || !k2.is_finite() {
            return Err(invalid(format!("bad BAL intrinsics f={f} k1={k1} k2={k2}")));
        }
        Ok(Self { f, k1, k2 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CameraIntrinsics {
    Pinhole(Pinhole),
    Bal(BalIntrinsics),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub camera_index: usize,
    pub point_index: usize,
    pub pixel: [f64; 2],
}

/// Relative pose constraint `T_ij` between poses `i` and `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PgoEdge {
    pub i: usize,
    pub j: usize,
    pub measurement: PoseSE3,
    /// Information matrix in `[rho | omega]` order; identity when `None`.
    pub information: Option<Matrix6<f64>>,
}

/// Pixel of `point` seen by a camera with world-to-camera `pose`.
pub fn pinhole_project(pose: &PoseSE3, point: &Vec3, k: &Pinhole) -> Result<[f64; 2]> {
    let p = pose.act(point);
    if !(p.z > PINHOLE_MIN_DEPTH) {
        return Err(Error::Cheirality { row: 0, depth: p.z });
    }
    Ok([k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy])
}

/// BAL projection: the camera looks down its negative z axis and the image
/// origin is the principal point.
pub fn bal_project(pose: &PoseSE3, point: &Vec3, k: &BalIntrinsics) -> Result<[f64; 2]> {
    let p = pose.act(point);
    if !(p.z.abs() > BAL_MIN_DEPTH) {
        return Err(Error::Cheirality { row: 0, depth: p.z });
    }
    let q = [-p.x / p.z, -p.y / p.z];
    let n = q[0] * q[0] + q[1] * q[1];
    let d = 1.0 + k.k1 * n + k.k2 * n * n;
    Ok([k.f * d * q[0], k.f * d * q[1]])
}

/// How the cameras of a BA problem project.
#[derive(Debug, Clone, PartialEq)]
pub enum CameraModel {
    /// One pinhole shared by every camera.
    Pinhole(Pinhole),
    /// One BAL intrinsics triple per camera.
    Bal(Vec<BalIntrinsics>),
}

/// Reprojection residuals `project(pose_i, p_j) - x_ij`, one 2-row per
/// observation. Parameter group 0 holds poses, group 1 points.
#[derive(Debug, Clone)]
pub struct BundleAdjustment {
    camera: CameraModel,
    num_cameras: usize,
    num_points: usize,
    camera_index: Arc<[u32]>,
    point_index: Arc<[u32]>,
    pixels: Vec<f64>,
    bal_rows: Vec<f64>,
}

impl BundleAdjustment {
    pub fn new(
        camera: CameraModel,
        num_cameras: usize,
        num_points: usize,
        observations: &[Observation],
    ) -> Result<Self> {
        if num_cameras == 0 || num_points == 0 {
            return Err(invalid("bundle adjustment needs at least one camera and one point"));
        }
        if observations.is_empty() {
            return Err(invalid("bundle adjustment needs at least one observation"));
        }
        if num_cameras > u32::MAX as usize || num_points > u32::MAX as usize {
            return Err(invalid("entity counts exceed 32-bit indices"));
        }
        let bal_rows = match &camera {
            CameraModel::Pinhole(_) => Vec::new(),
            CameraModel::Bal(k) => {
                if k.len() != num_cameras {
                    return Err(invalid(format!(
                        "{} BAL intrinsics for {num_cameras} cameras",
                        k.len()
                    )));
                }
                k.iter().flat_map(|c| [c.f, c.k1, c.k2]).collect()
            }
        };
        for (position, o) in observations.iter().enumerate() {
            if o.camera_index >= num_cameras {
                return Err(Error::IndexOutOfRange {
                    position,
                    index: o.camera_index,
                    len: num_cameras,
                });
            }
            if o.point_index >= num_points {
                return Err(Error::IndexOutOfRange {
                    position,
                    index: o.point_index,
                    len: num_points,
                });
            }
        }
        Ok(Self {
            camera,
            num_cameras,
            num_points,
            camera_index: observations.iter().map(|o| o.camera_index as u32).collect(),
            point_index: observations.iter().map(|o| o.point_index as u32).collect(),
            pixels: observations.iter().flat_map(|o| o.pixel).collect(),
            bal_rows,
        })
    }

    pub fn num_observations(&self) -> usize {
        self.camera_index.len()
    }

    pub fn num_cameras(&self) -> usize {
        self.num_cameras
    }

    pub fn num_points(&self) -> usize {
        self.num_points
    }

    pub fn camera(&self) -> &CameraModel {
        &self.camera
    }

    /// Poses as group 0 and points as group 1, all free.
    pub fn params(&self, poses: &[PoseSE3], points: &[Vec3]) -> Result<ParamSet> {
        if poses.len() != self.num_cameras || points.len() != self.num_points {
            return Err(invalid(format!(
                "expected {} poses and {} points, got {} and {}",
                self.num_cameras,
                self.num_points,
                poses.len(),
                points.len()
            )));
        }
        let mut ps = ParamSet::new();
        ps.add_poses(poses)?;
        ps.add_points(points)?;
        Ok(ps)
    }

    /// Reprojection MSE: `sum ||r_ij||^2 / N_obs`.
    pub fn mse(&self, cost: f64) -> f64 {
        cost / self.num_observations() as f64
    }

    /// Unbatched scalar evaluation, one observation at a time.
    pub fn residuals_scalar(&self, poses: &[PoseSE3], points: &[Vec3]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.pixels.len());
        for k in 0..self.num_observations() {
            let pose = &poses[self.camera_index[k] as usize];
            let point = &points[self.point_index[k] as usize];
            let px = match &self.camera {
                CameraModel::Pinhole(kk) => pinhole_project(pose, point, kk),
                CameraModel::Bal(ks) => bal_project(pose, point, &ks[self.camera_index[k] as usize]),
            }
            .map_err(|e| match e {
                Error::Cheirality { depth, .. } => Error::Cheirality { row: k, depth },
                e => e,
            })?;
            out.push(px[0] - self.pixels[2 * k]);
            out.push(px[1] - self.pixels[2 * k + 1]);
        }
        Ok(out)
    }
}

impl ResidualModel for BundleAdjustment {
    fn residuals(&self, graph: &mut TraceGraph, params: &[Traced]) -> Result<Traced> {
        let [poses, points] = params else {
            return Err(invalid("bundle adjustment expects pose and point groups"));
        };
        let cams = graph.gather(*poses, Arc::clone(&self.camera_index))?;
        let pts = graph.gather(*points, Arc::clone(&self.point_index))?;
        let local = graph.act(cams, pts)?;
        let projected = match &self.camera {
            CameraModel::Pinhole(k) => graph.pinhole_project(local, *k)?,
            CameraModel::Bal(_) => {
                let table = graph.constant(ValueKind::Vector(3), self.bal_rows.clone())?;
                let intr = graph.gather(table, Arc::clone(&self.camera_index))?;
                graph.bal_project(local, intr)?
            }
        };
        let observed = graph.constant(ValueKind::Vector(2), self.pixels.clone())?;
        graph.sub(projected, observed)
    }
}

/// Relative-pose residuals `W_ij log(T_i^-1 T_j T_ij^-1)` over one pose group.
///
/// `W_ij = L^T` where `L L^T` is the edge information, so `||r||^2` is the
/// Mahalanobis error of the unwhitened residual.
#[derive(Debug, Clone)]
pub struct PoseGraph {
    num_poses: usize,
    from: Arc<[u32]>,
    to: Arc<[u32]>,
    inv_measurements: Vec<f64>,
    whitening: Option<Vec<f64>>,
}

impl PoseGraph {
    pub fn new(num_poses: usize, edges: &[PgoEdge]) -> Result<Self> {
        if num_poses == 0 || edges.is_empty() {
            return Err(invalid("pose graph needs poses and edges"));
        }
        if num_poses > u32::MAX as usize {
            return Err(invalid("pose count exceeds 32-bit indices"));
        }
        let mut inv = Vec::with_capacity(edges.len() * 7);
        let mut whitening = Vec::with_capacity(edges.len() * 36);
        let mut weighted = false;
        for (position, e) in edges.iter().enumerate() {
            for idx in [e.i, e.j] {
                if idx >= num_poses {
                    return Err(Error::IndexOutOfRange {
                        position,
                        index: idx,
                        len: num_poses,
                    });
                }
            }
            if e.i == e.j {
                return Err(invalid(format!("edge {position} connects pose {} to itself", e.i)));
            }
            inv.extend(e.measurement.inverse().to_storage());
            let w = match &e.information {
                Some(info) => {
                    weighted |= *info != Matrix6::identity();
                    whitening_of(info).ok_or_else(|| {
                        invalid(format!("edge {position} information is not symmetric PSD"))
                    })?
                }
                None => Matrix6::identity(),
            };
            // row-major per edge
            whitening.extend(w.transpose().iter().copied());
        }
        Ok(Self {
            num_poses,
            from: edges.iter().map(|e| e.i as u32).collect(),
            to: edges.iter().map(|e| e.j as u32).collect(),
            inv_measurements: inv,
            whitening: weighted.then_some(whitening),
        })
    }

    pub fn num_poses(&self) -> usize {
        self.num_poses
    }

    pub fn num_edges(&self) -> usize {
        self.from.len()
    }

    /// Pose group 0; pose 0 is held fixed when `anchor` is set.
    pub fn params(&self, poses: &[PoseSE3], anchor: bool) -> Result<ParamSet> {
        if poses.len() != self.num_poses {
            return Err(invalid(format!(
                "expected {} poses, got {}",
                self.num_poses,
                poses.len()
            )));
        }
        let mut ps = ParamSet::new();
        let g = ps.add_poses(poses)?;
        if anchor {
            ps.fix(g, 0)?;
        }
        Ok(ps)
    }

    /// Unbatched scalar evaluation.
    pub fn residuals_scalar(&self, poses: &[PoseSE3]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_edges() * 6);
        for k in 0..self.num_edges() {
            let a = &poses[self.from[k] as usize];
            let b = &poses[self.to[k] as usize];
            let m = PoseSE3::from_storage_unchecked(&self.inv_measurements[k * 7..k * 7 + 7]);
            let e = a.inverse().compose(b).compose(&m).log().to_vector();
            let e = match &self.whitening {
                Some(w) => Matrix6::from_row_slice(&w[k * 36..k * 36 + 36]) * e,
                None => e,
            };
            out.extend(e.iter());
        }
        out
    }
}

impl ResidualModel for PoseGraph {
    fn residuals(&self, graph: &mut TraceGraph, params: &[Traced]) -> Result<Traced> {
        let [poses] = params else {
            return Err(invalid("pose graph expects a single pose group"));
        };
        let a = graph.gather(*poses, Arc::clone(&self.from))?;
        let b = graph.gather(*poses, Arc::clone(&self.to))?;
        let m = graph.constant(ValueKind::Pose, self.inv_measurements.clone())?;
        let w = match &self.whitening {
            Some(w) => Some(graph.constant(ValueKind::Vector(36), w.clone())?),
            None => None,
        };
        graph.relative_pose_log(a, b, m, w)
    }
}

/// `W` with `W^T W = info`: the transposed Cholesky factor, or a symmetric
/// square root when the information is only semidefinite.
fn whitening_of(info: &Matrix6<f64>) -> Option<Matrix6<f64>> {
    let scale = info.amax().max(1.0);
    if (info - info.transpose()).amax() > 1e-9 * scale || info.iter().any(|v| !v.is_finite()) {
        return None;
    }
    if let Some(ch) = info.cholesky() {
        return Some(ch.l().transpose());
    }
    let eig = SymmetricEigen::new(*info);
    if eig.eigenvalues.iter().any(|&l| l < -1e-9 * scale) {
        return None;
    }
    let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Some(Matrix6::from_diagonal(&sqrt) * eig.eigenvectors.transpose())
}
