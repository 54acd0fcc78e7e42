//! Block-sparse-row matrices and the kernels the LM loop needs.
//!
//! A [`BsrMatrix`] stores dense `br x bc` blocks in row-major order. Its
//! sparsity pattern lives in a shared [`BsrPattern`] so that caches keyed on
//! the pattern can be validated cheaply (pointer equality first, structural
//! equality as fallback).
//!
//! Explicitly stored zero blocks are never pruned; the pattern of every
//! kernel output depends only on the input patterns.

mod mtx;
mod normal;
mod spgemm;

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{invalid, Result};

pub use mtx::write_matrix_market;
pub use normal::NormalAssembler;
pub use spgemm::{spgemm_numeric, spgemm_numeric_into, spgemm_symbolic, ProductCache, SymbolicProduct};

/// Largest number of scalars [`BsrMatrix::to_dense`] will materialize.
pub const DENSE_LIMIT: usize = 1 << 26;

/// Block-level sparsity pattern in CSR layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BsrPattern {
    block_rows: usize,
    block_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
}

impl BsrPattern {
    pub fn new(
        block_rows: usize,
        block_cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<u32>,
    ) -> Result<Self> {
        if block_cols > u32::MAX as usize {
            return Err(invalid("block column count exceeds 32-bit index range"));
        }
        if row_ptr.len() != block_rows + 1 || row_ptr[0] != 0 {
            return Err(invalid(format!(
                "row_ptr must have {} entries starting at 0",
                block_rows + 1
            )));
        }
        if *row_ptr.last().unwrap() != col_idx.len() {
            return Err(invalid("row_ptr does not end at the stored block count"));
        }
        for (r, w) in row_ptr.windows(2).enumerate() {
            if w[0] > w[1] {
                return Err(invalid(format!("row_ptr decreases at block row {r}")));
            }
            let cols = &col_idx[w[0]..w[1]];
            if cols.windows(2).any(|c| c[0] >= c[1]) {
                return Err(invalid(format!(
                    "column indices of block row {r} are not strictly increasing"
                )));
            }
            if let Some(&c) = cols.last() {
                if c as usize >= block_cols {
                    return Err(invalid(format!(
                        "column {c} in block row {r} exceeds {block_cols} block columns"
                    )));
                }
            }
        }
        Ok(Self {
            block_rows,
            block_cols,
            row_ptr,
            col_idx,
        })
    }

    pub(crate) fn new_unchecked(
        block_rows: usize,
        block_cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<u32>,
    ) -> Self {
        debug_assert!(Self::new(block_rows, block_cols, row_ptr.clone(), col_idx.clone()).is_ok());
        Self {
            block_rows,
            block_cols,
            row_ptr,
            col_idx,
        }
    }

    pub fn block_rows(&self) -> usize {
        self.block_rows
    }
    pub fn block_cols(&self) -> usize {
        self.block_cols
    }
    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }
    pub fn col_idx(&self) -> &[u32] {
        &self.col_idx
    }
    pub fn nnz_blocks(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.col_idx[self.row_ptr[r]..self.row_ptr[r + 1]]
    }

    /// Position of block `(r, c)` in storage order.
    pub fn find(&self, r: usize, c: usize) -> Option<usize> {
        let start = self.row_ptr[r];
        self.row(r)
            .binary_search(&(c as u32))
            .ok()
            .map(|k| start + k)
    }

    /// `(row, col)` of every stored block in storage order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.block_rows)
            .flat_map(move |r| self.row(r).iter().map(move |&c| (r, c as usize)))
    }
}

/// Block-sparse-row matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct BsrMatrix {
    block_shape: (usize, usize),
    pattern: Arc<BsrPattern>,
    values: Vec<f64>,
}

impl BsrMatrix {
    pub fn new(block_shape: (usize, usize), pattern: Arc<BsrPattern>, values: Vec<f64>) -> Result<Self> {
        let (br, bc) = block_shape;
        if br == 0 || bc == 0 {
            return Err(invalid("block dimensions must be positive"));
        }
        let want = pattern.nnz_blocks() * br * bc;
        if values.len() != want {
            return Err(invalid(format!(
                "values length {} does not match {} blocks of {br}x{bc}",
                values.len(),
                pattern.nnz_blocks()
            )));
        }
        Ok(Self {
            block_shape,
            pattern,
            values,
        })
    }

    /// Builds from raw CSR arrays, validating every invariant.
    pub fn from_parts(
        block_shape: (usize, usize),
        block_rows: usize,
        block_cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<u32>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let pattern = BsrPattern::new(block_rows, block_cols, row_ptr, col_idx)?;
        Self::new(block_shape, Arc::new(pattern), values)
    }

    pub fn zeros(block_shape: (usize, usize), pattern: Arc<BsrPattern>) -> Self {
        let n = pattern.nnz_blocks() * block_shape.0 * block_shape.1;
        Self {
            block_shape,
            pattern,
            values: vec![0.0; n],
        }
    }

    /// Assembles from `(block_row, block_col, block)` triplets. Blocks landing
    /// on the same position are summed in input order.
    pub fn from_triplets(
        block_shape: (usize, usize),
        block_rows: usize,
        block_cols: usize,
        triplets: &[(usize, usize, &[f64])],
    ) -> Result<Self> {
        let bsz = block_shape.0 * block_shape.1;
        let mut order: Vec<usize> = (0..triplets.len()).collect();
        for (k, &(r, c, b)) in triplets.iter().enumerate() {
            if r >= block_rows || c >= block_cols {
                return Err(invalid(format!(
                    "triplet {k} at ({r}, {c}) outside {block_rows}x{block_cols} blocks"
                )));
            }
            if b.len() != bsz {
                return Err(invalid(format!("triplet {k} has {} values, expected {bsz}", b.len())));
            }
        }
        // stable: duplicates keep input order for summation
        order.sort_by_key(|&k| (triplets[k].0, triplets[k].1));
        let mut row_ptr = vec![0usize; block_rows + 1];
        let mut col_idx = Vec::new();
        let mut values: Vec<f64> = Vec::new();
        let mut last: Option<(usize, usize)> = None;
        for k in order {
            let (r, c, b) = triplets[k];
            if last == Some((r, c)) {
                let start = values.len() - bsz;
                for (v, x) in values[start..].iter_mut().zip(b) {
                    *v += x;
                }
            } else {
                row_ptr[r + 1] += 1;
                col_idx.push(c as u32);
                values.extend_from_slice(b);
                last = Some((r, c));
            }
        }
        for r in 0..block_rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self::from_parts(block_shape, block_rows, block_cols, row_ptr, col_idx, values)
    }

    /// Stores every block of `dense` that has at least one nonzero.
    pub fn from_dense(dense: &DMatrix<f64>, block_shape: (usize, usize)) -> Result<Self> {
        let (br, bc) = block_shape;
        if br == 0 || bc == 0 || dense.nrows() % br != 0 || dense.ncols() % bc != 0 {
            return Err(invalid(format!(
                "{}x{} matrix is not divisible into {br}x{bc} blocks",
                dense.nrows(),
                dense.ncols()
            )));
        }
        let (rows, cols) = (dense.nrows() / br, dense.ncols() / bc);
        let mut row_ptr = vec![0usize];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for i in 0..rows {
            for j in 0..cols {
                let blk = dense.view((i * br, j * bc), (br, bc));
                if blk.iter().any(|&v| v != 0.0) {
                    col_idx.push(j as u32);
                    for a in 0..br {
                        for b in 0..bc {
                            values.push(blk[(a, b)]);
                        }
                    }
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self::from_parts(block_shape, rows, cols, row_ptr, col_idx, values)
    }

    /// Identity with `d x d` diagonal blocks.
    pub fn identity(n_blocks: usize, d: usize) -> Self {
        let row_ptr = (0..=n_blocks).collect();
        let col_idx = (0..n_blocks as u32).collect();
        let mut values = vec![0.0; n_blocks * d * d];
        for blk in values.chunks_mut(d * d) {
            for i in 0..d {
                blk[i * d + i] = 1.0;
            }
        }
        let pattern = BsrPattern::new_unchecked(n_blocks, n_blocks, row_ptr, col_idx);
        Self {
            block_shape: (d, d),
            pattern: Arc::new(pattern),
            values,
        }
    }

    pub fn block_shape(&self) -> (usize, usize) {
        self.block_shape
    }
    pub fn block_size(&self) -> usize {
        self.block_shape.0 * self.block_shape.1
    }
    pub fn block_rows(&self) -> usize {
        self.pattern.block_rows
    }
    pub fn block_cols(&self) -> usize {
        self.pattern.block_cols
    }
    pub fn nrows(&self) -> usize {
        self.pattern.block_rows * self.block_shape.0
    }
    pub fn ncols(&self) -> usize {
        self.pattern.block_cols * self.block_shape.1
    }
    pub fn nnz_blocks(&self) -> usize {
        self.pattern.nnz_blocks()
    }
    pub fn pattern(&self) -> &Arc<BsrPattern> {
        &self.pattern
    }
    pub fn row_ptr(&self) -> &[usize] {
        &self.pattern.row_ptr
    }
    pub fn col_idx(&self) -> &[u32] {
        &self.pattern.col_idx
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// The `k`-th stored block, row-major.
    pub fn block(&self, k: usize) -> &[f64] {
        let s = self.block_size();
        &self.values[k * s..(k + 1) * s]
    }

    pub fn same_pattern(&self, other: &BsrMatrix) -> bool {
        self.block_shape == other.block_shape && same_pattern(&self.pattern, &other.pattern)
    }

    pub fn to_dense(&self) -> Result<DMatrix<f64>> {
        self.to_dense_with_limit(DENSE_LIMIT)
    }

    pub fn to_dense_with_limit(&self, limit: usize) -> Result<DMatrix<f64>> {
        let (n, m) = (self.nrows(), self.ncols());
        if n.saturating_mul(m) > limit {
            return Err(invalid(format!(
                "dense conversion of {n}x{m} exceeds the {limit}-entry limit"
            )));
        }
        let (br, bc) = self.block_shape;
        let mut d = DMatrix::zeros(n, m);
        for (k, (r, c)) in self.pattern.entries().enumerate() {
            let blk = self.block(k);
            for a in 0..br {
                for b in 0..bc {
                    d[(r * br + a, c * bc + b)] = blk[a * bc + b];
                }
            }
        }
        Ok(d)
    }

    /// Scalar diagonal. Requires a square matrix with square blocks.
    pub fn diagonal(&self) -> Result<Vec<f64>> {
        let positions = self.diagonal_positions()?;
        Ok(positions.into_iter().map(|p| self.values[p]).collect())
    }

    /// Index into `values` of every scalar diagonal entry.
    fn diagonal_positions(&self) -> Result<Vec<usize>> {
        let (br, bc) = self.block_shape;
        if br != bc || self.block_rows() != self.block_cols() {
            return Err(invalid("diagonal access needs a square matrix of square blocks"));
        }
        let bs = br * bc;
        let mut out = Vec::with_capacity(self.nrows());
        for r in 0..self.block_rows() {
            let k = self
                .pattern
                .find(r, r)
                .ok_or_else(|| invalid(format!("diagonal block {r} is not stored")))?;
            out.extend((0..br).map(|i| k * bs + i * bc + i));
        }
        Ok(out)
    }
}

pub(crate) fn same_pattern(a: &Arc<BsrPattern>, b: &Arc<BsrPattern>) -> bool {
    Arc::ptr_eq(a, b) || **a == **b
}

/// Block transpose.
pub fn transpose(a: &BsrMatrix) -> BsrMatrix {
    let (br, bc) = a.block_shape;
    let (rows, cols) = (a.block_rows(), a.block_cols());
    let mut row_ptr = vec![0usize; cols + 1];
    for &c in a.col_idx() {
        row_ptr[c as usize + 1] += 1;
    }
    for c in 0..cols {
        row_ptr[c + 1] += row_ptr[c];
    }
    let nnz = a.nnz_blocks();
    let mut next = row_ptr.clone();
    let mut col_idx = vec![0u32; nnz];
    let mut src = vec![0usize; nnz];
    for r in 0..rows {
        for k in a.row_ptr()[r]..a.row_ptr()[r + 1] {
            let c = a.col_idx()[k] as usize;
            let dst = next[c];
            next[c] += 1;
            col_idx[dst] = r as u32;
            src[dst] = k;
        }
    }
    let bs = br * bc;
    let mut values = vec![0.0; nnz * bs];
    values
        .par_chunks_mut(bs)
        .zip(src.par_iter())
        .for_each(|(out, &k)| {
            let blk = &a.values[k * bs..(k + 1) * bs];
            for i in 0..br {
                for j in 0..bc {
                    out[j * br + i] = blk[i * bc + j];
                }
            }
        });
    let pattern = BsrPattern::new_unchecked(cols, rows, row_ptr, col_idx);
    BsrMatrix {
        block_shape: (bc, br),
        pattern: Arc::new(pattern),
        values,
    }
}

/// `y = A x`, accumulating each row in ascending column order.
pub fn spmv(a: &BsrMatrix, x: &[f64]) -> Result<Vec<f64>> {
    let mut y = vec![0.0; a.nrows()];
    spmv_into(a, x, &mut y)?;
    Ok(y)
}

pub fn spmv_into(a: &BsrMatrix, x: &[f64], y: &mut [f64]) -> Result<()> {
    if x.len() != a.ncols() {
        return Err(invalid(format!(
            "spmv input has length {}, matrix has {} columns",
            x.len(),
            a.ncols()
        )));
    }
    if y.len() != a.nrows() {
        return Err(invalid(format!(
            "spmv output has length {}, matrix has {} rows",
            y.len(),
            a.nrows()
        )));
    }
    let (br, bc) = a.block_shape;
    let bs = br * bc;
    let row_ptr = a.row_ptr();
    let col_idx = a.col_idx();
    let vals = &a.values;
    let row_kernel = |(r, out): (usize, &mut [f64])| {
        out.fill(0.0);
        for k in row_ptr[r]..row_ptr[r + 1] {
            let c = col_idx[k] as usize;
            let xs = &x[c * bc..(c + 1) * bc];
            let blk = &vals[k * bs..(k + 1) * bs];
            for (i, o) in out.iter_mut().enumerate() {
                let mut s = 0.0;
                for j in 0..bc {
                    s += blk[i * bc + j] * xs[j];
                }
                *o += s;
            }
        }
    };
    if a.nrows() < 4096 {
        y.chunks_mut(br).enumerate().for_each(row_kernel);
    } else {
        y.par_chunks_mut(br).enumerate().for_each(row_kernel);
    }
    Ok(())
}

/// Replaces every scalar diagonal entry `d` by `d * (1 + lambda)`.
pub fn diag_scale_add(a: &BsrMatrix, lambda: f64) -> Result<BsrMatrix> {
    let mut out = a.clone();
    diag_scale_add_in_place(&mut out, lambda)?;
    Ok(out)
}

pub fn diag_scale_add_in_place(a: &mut BsrMatrix, lambda: f64) -> Result<()> {
    if !lambda.is_finite() {
        return Err(invalid(format!("damping {lambda} is not finite")));
    }
    for p in a.diagonal_positions()? {
        a.values[p] += lambda * a.values[p];
    }
    Ok(())
}

/// Clamps every scalar diagonal entry into `[min, max]`.
pub fn diag_clamp(a: &BsrMatrix, min: f64, max: f64) -> Result<BsrMatrix> {
    let mut out = a.clone();
    diag_clamp_in_place(&mut out, min, max)?;
    Ok(out)
}

pub fn diag_clamp_in_place(a: &mut BsrMatrix, min: f64, max: f64) -> Result<()> {
    if min.is_nan() || max.is_nan() || min > max {
        return Err(invalid(format!("clamp range [{min}, {max}] is empty")));
    }
    for p in a.diagonal_positions()? {
        a.values[p] = a.values[p].clamp(min, max);
    }
    Ok(())
}
