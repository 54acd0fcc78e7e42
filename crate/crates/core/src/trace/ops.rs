//! The closed set of differentiable row-wise operations.
//!
//! Every op maps row `k` of its parents to row `k` of its output, so it never
//! changes which entities a residual depends on. Each op supplies its forward
//! kernel and a hand-derived local Jacobian per parent, expressed in the
//! parents' tangent coordinates.

use nalgebra::{Matrix6, SMatrix};

use crate::error::{Error, Result};
use crate::lie::{se3_left_jacobian_inv, skew, PoseSE3, Vec3};
use crate::problems::Pinhole;

/// Depth below which a pinhole projection is rejected.
pub const PINHOLE_MIN_DEPTH: f64 = 1e-9;
/// Smallest `|z|` accepted by the BAL projection.
pub const BAL_MIN_DEPTH: f64 = 1e-12;

/// Shape of the values a node carries per row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueKind {
    Pose,
    Vector(usize),
}

impl ValueKind {
    pub fn width(&self) -> usize {
        match self {
            ValueKind::Pose => 7,
            ValueKind::Vector(d) => *d,
        }
    }

    pub fn tangent(&self) -> usize {
        match self {
            ValueKind::Pose => 6,
            ValueKind::Vector(d) => *d,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// `(pose, point3) -> R p + t`
    Act,
    /// `(point3) -> pixel` with a shared pinhole camera.
    PinholeProject(Pinhole),
    /// `(point3, [f, k1, k2]) -> pixel`, BAL convention.
    BalProject,
    /// `(a, b, m, [w])` -> `w * log(a^-1 b m)` where `m` is the inverse
    /// measurement and `w` an optional row-major 6x6 whitening matrix.
    RelativePoseLog { weighted: bool },
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    Scale(f64),
    Offset(f64),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Act => "se3_act",
            Op::PinholeProject(_) => "pinhole_project",
            Op::BalProject => "bal_project",
            Op::RelativePoseLog { .. } => "relative_pose_log",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Offset(_) => "offset",
        }
    }

    /// Output kind for the given parent kinds, or an error naming the misuse.
    pub(crate) fn output_kind(&self, parents: &[ValueKind]) -> Result<ValueKind> {
        use ValueKind::*;
        let bad = || {
            Error::InvalidArgument(format!(
                "{} cannot take inputs {parents:?}",
                self.name()
            ))
        };
        match (self, parents) {
            (Op::Act, [Pose, Vector(3)]) => Ok(Vector(3)),
            (Op::PinholeProject(_), [Vector(3)]) => Ok(Vector(2)),
            (Op::BalProject, [Vector(3), Vector(3)]) => Ok(Vector(2)),
            (Op::RelativePoseLog { weighted: false }, [Pose, Pose, Pose]) => Ok(Vector(6)),
            (Op::RelativePoseLog { weighted: true }, [Pose, Pose, Pose, Vector(36)]) => Ok(Vector(6)),
            (Op::Add | Op::Sub | Op::Mul, [Vector(a), Vector(b)]) if a == b => Ok(Vector(*a)),
            (Op::Scale(_) | Op::Offset(_), [Vector(a)]) => Ok(Vector(*a)),
            _ => Err(bad()),
        }
    }

    /// Forward kernel for one row. `row` is only used for error reporting.
    pub(crate) fn forward_row(&self, row: usize, inputs: &[&[f64]], out: &mut [f64]) -> Result<()> {
        match self {
            Op::Act => {
                let p = PoseSE3::from_storage_unchecked(inputs[0]).act(&vec3(inputs[1]));
                out.copy_from_slice(p.as_slice());
            }
            Op::PinholeProject(k) => {
                let (x, y, z) = (inputs[0][0], inputs[0][1], inputs[0][2]);
                if !(z > PINHOLE_MIN_DEPTH) {
                    return Err(Error::Cheirality { row, depth: z });
                }
                out[0] = k.fx * x / z + k.cx;
                out[1] = k.fy * y / z + k.cy;
            }
            Op::BalProject => {
                let (x, y, z) = (inputs[0][0], inputs[0][1], inputs[0][2]);
                if !(z.abs() > BAL_MIN_DEPTH) {
                    return Err(Error::Cheirality { row, depth: z });
                }
                let [f, k1, k2] = [inputs[1][0], inputs[1][1], inputs[1][2]];
                let (qx, qy) = (-x / z, -y / z);
                let n = qx * qx + qy * qy;
                let d = 1.0 + k1 * n + k2 * n * n;
                out[0] = f * d * qx;
                out[1] = f * d * qy;
            }
            Op::RelativePoseLog { weighted } => {
                let e = relative_error(inputs).to_vector();
                if *weighted {
                    let w = SMatrix::<f64, 6, 6>::from_row_slice(inputs[3]);
                    out.copy_from_slice((w * e).as_slice());
                } else {
                    out.copy_from_slice(e.as_slice());
                }
            }
            Op::Add => zip_into(out, inputs[0], inputs[1], |a, b| a + b),
            Op::Sub => zip_into(out, inputs[0], inputs[1], |a, b| a - b),
            Op::Mul => zip_into(out, inputs[0], inputs[1], |a, b| a * b),
            Op::Scale(s) => {
                for (o, a) in out.iter_mut().zip(inputs[0]) {
                    *o = s * a;
                }
            }
            Op::Offset(c) => {
                for (o, a) in out.iter_mut().zip(inputs[0]) {
                    *o = a + c;
                }
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "{} produced a non-finite value in row {row}",
                self.name()
            )));
        }
        Ok(())
    }

    /// Whether the op has a local derivative with respect to `parent`.
    pub(crate) fn differentiable_in(&self, parent: usize) -> bool {
        match self {
            Op::BalProject => parent == 0,
            Op::RelativePoseLog { .. } => parent < 2,
            _ => true,
        }
    }

    /// Local Jacobian of one output row w.r.t. the tangent of one parent row,
    /// written row-major into `block` (`out_tangent x parent_tangent`).
    pub(crate) fn local_block(&self, parent: usize, inputs: &[&[f64]], out: &[f64], block: &mut [f64]) {
        match self {
            Op::Act => {
                if parent == 0 {
                    // d(Exp(d) T p)/dd = [I | -[P]x]
                    let px = skew(&vec3(out));
                    block.fill(0.0);
                    for i in 0..3 {
                        block[i * 6 + i] = 1.0;
                        for j in 0..3 {
                            block[i * 6 + 3 + j] = -px[(i, j)];
                        }
                    }
                } else {
                    let r = PoseSE3::from_storage_unchecked(inputs[0]).rotation.to_matrix();
                    write_row_major(block, r.as_slice(), 3, 3);
                }
            }
            Op::PinholeProject(k) => {
                let (x, y, z) = (inputs[0][0], inputs[0][1], inputs[0][2]);
                let iz = 1.0 / z;
                block.copy_from_slice(&[
                    k.fx * iz,
                    0.0,
                    -k.fx * x * iz * iz,
                    0.0,
                    k.fy * iz,
                    -k.fy * y * iz * iz,
                ]);
            }
            Op::BalProject => {
                let (x, y, z) = (inputs[0][0], inputs[0][1], inputs[0][2]);
                let [f, k1, k2] = [inputs[1][0], inputs[1][1], inputs[1][2]];
                let iz = 1.0 / z;
                let q = [-x * iz, -y * iz];
                let n = q[0] * q[0] + q[1] * q[1];
                let d = 1.0 + k1 * n + k2 * n * n;
                let dd = 2.0 * (k1 + 2.0 * k2 * n);
                // dpix/dq (2x2) then dq/dP (2x3)
                let dpq = [
                    f * (d + dd * q[0] * q[0]),
                    f * dd * q[0] * q[1],
                    f * dd * q[1] * q[0],
                    f * (d + dd * q[1] * q[1]),
                ];
                let dqp = [-iz, 0.0, x * iz * iz, 0.0, -iz, y * iz * iz];
                for i in 0..2 {
                    for j in 0..3 {
                        block[i * 3 + j] = dpq[i * 2] * dqp[j] + dpq[i * 2 + 1] * dqp[3 + j];
                    }
                }
            }
            Op::RelativePoseLog { weighted } => {
                let a = PoseSE3::from_storage_unchecked(inputs[0]);
                let e = relative_error(inputs);
                let mut j: Matrix6<f64> = se3_left_jacobian_inv(&e) * a.inverse().adjoint();
                if *weighted {
                    j = SMatrix::<f64, 6, 6>::from_row_slice(inputs[3]) * j;
                }
                if parent == 0 {
                    j = -j;
                }
                write_row_major(block, j.as_slice(), 6, 6);
            }
            Op::Add | Op::Sub | Op::Scale(_) | Op::Offset(_) => {
                let d = out.len();
                let s = match self {
                    Op::Sub if parent == 1 => -1.0,
                    Op::Scale(s) => *s,
                    _ => 1.0,
                };
                block.fill(0.0);
                for i in 0..d {
                    block[i * d + i] = s;
                }
            }
            Op::Mul => {
                let other = inputs[1 - parent];
                let d = out.len();
                block.fill(0.0);
                for i in 0..d {
                    block[i * d + i] = other[i];
                }
            }
        }
    }
}

fn relative_error(inputs: &[&[f64]]) -> crate::lie::Tangent6 {
    let a = PoseSE3::from_storage_unchecked(inputs[0]);
    let b = PoseSE3::from_storage_unchecked(inputs[1]);
    let m = PoseSE3::from_storage_unchecked(inputs[2]);
    a.inverse().compose(&b).compose(&m).log()
}

fn vec3(s: &[f64]) -> Vec3 {
    Vec3::new(s[0], s[1], s[2])
}

fn zip_into(out: &mut [f64], a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o = f(*x, *y);
    }
}

/// nalgebra storage is column-major; blocks in this crate are row-major.
fn write_row_major(block: &mut [f64], col_major: &[f64], rows: usize, cols: usize) {
    for i in 0..rows {
        for j in 0..cols {
            block[i * cols + j] = col_major[j * rows + i];
        }
    }
}
