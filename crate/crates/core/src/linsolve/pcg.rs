use super::{dot, norm, SolveStats};
use crate::error::{invalid, Error, Result};
use crate::sparse::{spmv_into, BsrMatrix};

/// `m[i] = 1 / a[i][i]`.
pub fn jacobi_preconditioner(a: &BsrMatrix) -> Result<Vec<f64>> {
    let d = a.diagonal()?;
    d.iter()
        .enumerate()
        .map(|(i, &v)| {
            if v > 0.0 && v.is_finite() {
                Ok(1.0 / v)
            } else {
                Err(invalid(format!("diagonal entry {i} is {v}; damping too small?")))
            }
        })
        .collect()
}

/// State handed to the observer after every CG iteration.
#[derive(Debug)]
pub struct PcgIterate<'a> {
    pub iteration: usize,
    pub x: &'a [f64],
    /// Recurrence residual `b - A x`.
    pub residual: &'a [f64],
}

/// Solves `A x = b` from `x = 0` until `||r|| <= tol ||b||` or `max_iters`.
pub fn pcg_solve(a: &BsrMatrix, b: &[f64], precond: &[f64], tol: f64, max_iters: usize) -> Result<(Vec<f64>, SolveStats)> {
    pcg_solve_observed(a, b, precond, tol, max_iters, |_| {})
}

pub fn pcg_solve_observed(
    a: &BsrMatrix,
    b: &[f64],
    precond: &[f64],
    tol: f64,
    max_iters: usize,
    mut observe: impl FnMut(PcgIterate<'_>),
) -> Result<(Vec<f64>, SolveStats)> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n || precond.len() != n {
        return Err(invalid(format!(
            "pcg needs a square matrix with matching vectors, got {}x{}, b {}, M {}",
            a.nrows(),
            a.ncols(),
            b.len(),
            precond.len()
        )));
    }
    if !(tol > 0.0) {
        return Err(invalid(format!("tolerance must be positive, got {tol}")));
    }
    let mut x = vec![0.0; n];
    let nb = norm(b);
    if nb == 0.0 {
        let stats = SolveStats {
            iterations: 0,
            relative_residual: 0.0,
            converged: true,
        };
        return Ok((x, stats));
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(precond).map(|(r, m)| r * m).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut rel = 1.0;
    for it in 1..=max_iters {
        spmv_into(a, &p, &mut ap)?;
        let pap = dot(&p, &ap);
        if !pap.is_finite() || !(pap > 0.0) {
            return Err(Error::NumericalBreakdown { iteration: it });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        rel = norm(&r) / nb;
        if !rel.is_finite() {
            return Err(Error::NumericalBreakdown { iteration: it });
        }
        observe(PcgIterate {
            iteration: it,
            x: &x,
            residual: &r,
        });
        if rel <= tol {
            let stats = SolveStats {
                iterations: it,
                relative_residual: rel,
                converged: true,
            };
            return Ok((x, stats));
        }
        for i in 0..n {
            z[i] = r[i] * precond[i];
        }
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        if !beta.is_finite() {
            return Err(Error::NumericalBreakdown { iteration: it });
        }
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let stats = SolveStats {
        iterations: max_iters,
        relative_residual: rel,
        converged: false,
    };
    Ok((x, stats))
}
