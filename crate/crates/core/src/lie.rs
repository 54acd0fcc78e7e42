//! Rigid-body transforms on SE(3).
//!
//! Rotations are unit quaternions stored as `(x, y, z, w)` with `w >= 0`.
//! Tangent vectors are ordered `[rho | omega]`: translation first, then
//! rotation. Increments are applied on the left, `Exp(delta) * pose`, and every
//! analytic Jacobian in this crate is taken with respect to that left
//! perturbation at `delta = 0`.

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};

use crate::error::{invalid, Result};

pub type Vec3 = Vector3<f64>;

/// Below this rotation angle exp/log switch to their Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Jacobian coefficient functions use series below this angle; the closed
/// forms lose most of their digits to cancellation there.
const SERIES_ANGLE: f64 = 1e-2;

/// Unit quaternion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuatRotation {
    x: f64,
    y: f64,
    z: f64,
    w: f64,
}

impl Default for QuatRotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl QuatRotation {
    pub const fn identity() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            z: 0.0,
            w: 1.0,
        }
    }

    /// Normalizes `(x, y, z, w)` and flips the sign so that `w >= 0`.
    pub fn new(x: f64, y: f64, z: f64, w: f64) -> Result<Self> {
        let n2 = x * x + y * y + z * z + w * w;
        if !n2.is_finite() || n2 == 0.0 {
            return Err(invalid(format!(
                "quaternion ({x}, {y}, {z}, {w}) cannot be normalized"
            )));
        }
        Ok(Self::normalized(x, y, z, w))
    }

    fn normalized(x: f64, y: f64, z: f64, w: f64) -> Self {
        let n = (x * x + y * y + z * z + w * w).sqrt();
        let s = if w < 0.0 { -1.0 / n } else { 1.0 / n };
        Self {
            x: x * s,
            y: y * s,
            z: z * s,
            w: w * s,
        }
    }

    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }
    pub fn w(&self) -> f64 {
        self.w
    }

    /// Components in `(x, y, z, w)` order.
    pub fn coords(&self) -> [f64; 4] {
        [self.x, self.y, self.z, self.w]
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z + self.w * self.w).sqrt()
    }

    /// Rotation by the axis-angle vector `omega`.
    pub fn exp(omega: &Vec3) -> Self {
        let theta2 = omega.norm_squared();
        let theta = theta2.sqrt();
        let (s, c) = if theta < SMALL_ANGLE {
            (0.5 - theta2 / 48.0, 1.0 - theta2 / 8.0)
        } else {
            let half = 0.5 * theta;
            (half.sin() / theta, half.cos())
        };
        Self::normalized(s * omega.x, s * omega.y, s * omega.z, c)
    }

    /// Axis-angle vector with angle in `[0, pi]`.
    pub fn log(&self) -> Vec3 {
        let v = Vec3::new(self.x, self.y, self.z);
        let n2 = v.norm_squared();
        let n = n2.sqrt();
        if n < SMALL_ANGLE {
            // w is ~1 here: 2 atan(n / w) / n ~ (2 / w) (1 - n^2 / (3 w^2))
            let w2 = self.w * self.w;
            v * (2.0 / self.w * (1.0 - n2 / (3.0 * w2)))
        } else {
            // atan2 keeps full precision up to theta = pi (w = 0)
            let theta = 2.0 * n.atan2(self.w);
            v * (theta / n)
        }
    }

    pub fn compose(&self, b: &QuatRotation) -> Self {
        let a = self;
        Self::normalized(
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
        )
    }

    pub fn inverse(&self) -> Self {
        // conjugate; re-canonicalize so w >= 0 still holds
        Self::normalized(-self.x, -self.y, -self.z, self.w)
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        let u = Vec3::new(self.x, self.y, self.z);
        let t = 2.0 * u.cross(v);
        v + self.w * t + u.cross(&t)
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let (x, y, z, w) = (self.x, self.y, self.z, self.w);
        let (xx, yy, zz) = (x * x, y * y, z * z);
        let (xy, xz, yz) = (x * y, x * z, y * z);
        let (wx, wy, wz) = (w * x, w * y, w * z);
        Matrix3::new(
            1.0 - 2.0 * (yy + zz),
            2.0 * (xy - wz),
            2.0 * (xz + wy),
            2.0 * (xy + wz),
            1.0 - 2.0 * (xx + zz),
            2.0 * (yz - wx),
            2.0 * (xz - wy),
            2.0 * (yz + wx),
            1.0 - 2.0 * (xx + yy),
        )
    }
}

/// Element of the SE(3) tangent space, `[rho | omega]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Tangent6 {
    pub rho: Vec3,
    pub omega: Vec3,
}

impl Tangent6 {
    pub fn new(rho: Vec3, omega: Vec3) -> Self {
        Self { rho, omega }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            rho: Vec3::new(v[0], v[1], v[2]),
            omega: Vec3::new(v[3], v[4], v[5]),
        }
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self::from_slice(v.as_slice())
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.rho.x,
            self.rho.y,
            self.rho.z,
            self.omega.x,
            self.omega.y,
            self.omega.z,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.rho.iter().chain(self.omega.iter()).all(|c| c.is_finite())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.rho * s, self.omega * s)
    }
}

/// Rigid transform `x -> R x + t`, stored as 7 scalars.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PoseSE3 {
    pub rotation: QuatRotation,
    pub translation: Vec3,
}

/// Scalars per stored pose: `[tx, ty, tz, qx, qy, qz, qw]`.
pub const POSE_STORAGE: usize = 7;

impl PoseSE3 {
    pub fn new(rotation: QuatRotation, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(QuatRotation::identity(), t)
    }

    /// Reads `[tx, ty, tz, qx, qy, qz, qw]`; the quaternion is renormalized.
    pub fn from_storage(s: &[f64]) -> Result<Self> {
        if s.len() != POSE_STORAGE {
            return Err(invalid(format!(
                "pose storage needs {POSE_STORAGE} scalars, got {}",
                s.len()
            )));
        }
        let rotation = QuatRotation::new(s[3], s[4], s[5], s[6])?;
        Ok(Self::new(rotation, Vec3::new(s[0], s[1], s[2])))
    }

    /// Same as [`PoseSE3::from_storage`] for data that is already unit-norm.
    pub(crate) fn from_storage_unchecked(s: &[f64]) -> Self {
        Self {
            rotation: QuatRotation {
                x: s[3],
                y: s[4],
                z: s[5],
                w: s[6],
            },
            translation: Vec3::new(s[0], s[1], s[2]),
        }
    }

    pub fn to_storage(&self) -> [f64; POSE_STORAGE] {
        let t = &self.translation;
        let q = &self.rotation;
        [t.x, t.y, t.z, q.x, q.y, q.z, q.w]
    }

    pub fn exp(tau: &Tangent6) -> Result<Self> {
        if !tau.is_finite() {
            return Err(invalid("non-finite tangent vector"));
        }
        Ok(Self::exp_unchecked(tau))
    }

    pub(crate) fn exp_unchecked(tau: &Tangent6) -> Self {
        let omega = &tau.omega;
        let theta2 = omega.norm_squared();
        let theta = theta2.sqrt();
        let (a, b) = if theta < SMALL_ANGLE {
            (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
        } else {
            let h = (0.5 * theta).sin();
            (2.0 * h * h / theta2, (theta - theta.sin()) / (theta2 * theta))
        };
        let w = omega.cross(&tau.rho);
        let t = tau.rho + a * w + b * omega.cross(&w);
        Self::new(QuatRotation::exp(omega), t)
    }

    pub fn log(&self) -> Tangent6 {
        let omega = self.rotation.log();
        let theta2 = omega.norm_squared();
        let theta = theta2.sqrt();
        let c = if theta < SMALL_ANGLE {
            1.0 / 12.0 + theta2 / 720.0
        } else {
            let half = 0.5 * theta;
            (1.0 - half / half.tan()) / theta2
        };
        let t = &self.translation;
        let w = omega.cross(t);
        let rho = t - 0.5 * w + c * omega.cross(&w);
        Tangent6::new(rho, omega)
    }

    pub fn compose(&self, b: &PoseSE3) -> Self {
        Self::new(
            self.rotation.compose(&b.rotation),
            self.rotation.rotate(&b.translation) + self.translation,
        )
    }

    pub fn inverse(&self) -> Self {
        let r = self.rotation.inverse();
        Self::new(r, -r.rotate(&self.translation))
    }

    pub fn act(&self, p: &Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }

    /// `Exp(delta) * self`.
    pub fn retract(&self, delta: &Tangent6) -> Self {
        debug_assert!(delta.is_finite());
        Self::exp_unchecked(delta).compose(self)
    }

    /// 4x4 homogeneous matrix.
    pub fn to_homogeneous(&self) -> nalgebra::Matrix4<f64> {
        let mut m = nalgebra::Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation.to_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Adjoint in `[rho | omega]` order: `[[R, t^ R], [0, R]]`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation.to_matrix();
        let tr = skew(&self.translation) * r;
        let mut m = Matrix6::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 3>(0, 3).copy_from(&tr);
        m.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        m
    }
}

pub fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `(1 - cos t) / t^2` and `(t - sin t) / t^3`.
fn so3_coefficients(theta: f64) -> (f64, f64) {
    let t2 = theta * theta;
    if theta < SERIES_ANGLE {
        (
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        )
    } else {
        let h = (0.5 * theta).sin();
        (2.0 * h * h / t2, (theta - theta.sin()) / (t2 * theta))
    }
}

/// Left Jacobian of SO(3).
pub fn so3_left_jacobian(omega: &Vec3) -> Matrix3<f64> {
    let (a, b) = so3_coefficients(omega.norm());
    let w = skew(omega);
    Matrix3::identity() + a * w + b * w * w
}

/// Inverse of the SO(3) left Jacobian.
pub fn so3_left_jacobian_inv(omega: &Vec3) -> Matrix3<f64> {
    let theta = omega.norm();
    let t2 = theta * theta;
    let c = if theta < SERIES_ANGLE {
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half / half.tan()) / t2
    };
    let w = skew(omega);
    Matrix3::identity() - 0.5 * w + c * w * w
}

/// Off-diagonal block `Q(rho, omega)` of the SE(3) left Jacobian.
fn se3_q_block(rho: &Vec3, omega: &Vec3) -> Matrix3<f64> {
    let theta = omega.norm();
    let t2 = theta * theta;
    let (c1, c2, c3) = if theta < SERIES_ANGLE {
        (
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
            1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0,
            1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        (
            (theta - s) / (t2 * theta),
            (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta),
        )
    };
    let v = skew(rho);
    let w = skew(omega);
    let wv = w * v;
    let vw = v * w;
    let wvw = wv * w;
    0.5 * v + c1 * (wv + vw + wvw) + c2 * (w * wv + vw * w - 3.0 * wvw)
        + c3 * (wvw * w + w * wvw)
}

/// Left Jacobian of SE(3).
pub fn se3_left_jacobian(tau: &Tangent6) -> Matrix6<f64> {
    let j = so3_left_jacobian(&tau.omega);
    let q = se3_q_block(&tau.rho, &tau.omega);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&q);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    m
}

/// Inverse of the SE(3) left Jacobian:
/// `log(Exp(a) * Exp(tau)) ~ tau + se3_left_jacobian_inv(tau) * a`.
pub fn se3_left_jacobian_inv(tau: &Tangent6) -> Matrix6<f64> {
    let ji = so3_left_jacobian_inv(&tau.omega);
    let q = se3_q_block(&tau.rho, &tau.omega);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&ji);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-ji * q * ji));
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&ji);
    m
}
