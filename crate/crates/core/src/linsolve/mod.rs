//! Solvers for the damped normal equations `A x = b`.
//!
//! [`CholeskySolver`] factors `A` directly, computing the ordering and fill
//! pattern once per sparsity pattern. [`pcg_solve`] runs Jacobi-preconditioned
//! conjugate gradients using only matrix-vector products.

mod cholesky;
mod pcg;

pub use cholesky::{
    cholesky_numeric, cholesky_solve, cholesky_symbolic, CholeskySolver, NumericFactor, Ordering,
    SymbolicFactor, DIRECT_TOL,
};
pub use pcg::{jacobi_preconditioner, pcg_solve, pcg_solve_observed, PcgIterate};

use crate::error::Result;
use crate::sparse::{spmv, BsrMatrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    /// CG iterations; 0 for a direct solve.
    pub iterations: usize,
    /// `||A x - b|| / ||b||` (0 when `b = 0`).
    pub relative_residual: f64,
    pub converged: bool,
}

/// Which linear solver the optimizer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverKind {
    #[default]
    Cholesky,
    Pcg,
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `||A x - b|| / ||b||`, or `||A x||` when `b` is zero.
pub fn relative_residual(a: &BsrMatrix, x: &[f64], b: &[f64]) -> Result<f64> {
    let ax = spmv(a, x)?;
    let r: Vec<f64> = ax.iter().zip(b).map(|(p, q)| p - q).collect();
    let nb = norm(b);
    Ok(if nb > 0.0 { norm(&r) / nb } else { norm(&r) })
}
