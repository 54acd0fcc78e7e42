//! Sparse Levenberg-Marquardt for bundle adjustment and pose-graph
//! optimization.
//!
//! The pipeline per iteration is: trace the residual model to get a
//! block-sparse Jacobian ([`trace`]), form the normal equations with cached
//! symbolic products ([`sparse`]), damp and solve them ([`linsolve`]), and
//! accept or reject the step ([`optim`]). Residual models live in
//! [`problems`]; dataset parsers and synthetic generators in [`io`].

pub mod error;
pub mod io;
pub mod lie;
pub mod linsolve;
pub mod optim;
pub mod problems;
pub mod sparse;
pub mod trace;

pub use error::{Error, Result};
pub use lie::{PoseSE3, QuatRotation, Tangent6, Vec3};
