//! Normal equations `A = J^T J`, `g = J^T r` for a Jacobian split into one
//! BSR matrix per parameter group.
//!
//! Each pair of groups `(g, h)` gets its own block product `J_g^T J_h` with a
//! uniform block shape; the grid of products is then flattened into one
//! scalar matrix (1x1 blocks) for the solvers. Every scalar diagonal entry is
//! present in the flattened pattern even when an entity has no residuals.

use std::sync::Arc;

use rayon::prelude::*;

use super::{spmv, transpose, BsrMatrix, BsrPattern, ProductCache};
use crate::error::{invalid, Result};

#[derive(Debug, Clone)]
pub struct NormalAssembler {
    products: Vec<ProductCache>,
    scalar_pattern: Option<Arc<BsrPattern>>,
    flatten_builds: usize,
    reuse: bool,
}

impl Default for NormalAssembler {
    fn default() -> Self {
        Self::new(true)
    }
}

impl NormalAssembler {
    pub fn new(reuse: bool) -> Self {
        Self {
            products: Vec::new(),
            scalar_pattern: None,
            flatten_builds: 0,
            reuse,
        }
    }

    /// Symbolic SpGEMM phases run so far, summed over all group pairs.
    pub fn product_builds(&self) -> usize {
        self.products.iter().map(|p| p.symbolic_builds()).sum()
    }

    /// Times the flattened scalar pattern was (re)derived.
    pub fn flatten_builds(&self) -> usize {
        self.flatten_builds
    }

    /// Returns `(J^T J, J^T r)` with `J = [J_0 | J_1 | ...]`.
    pub fn assemble(&mut self, jacobian: &[BsrMatrix], residuals: &[f64]) -> Result<(BsrMatrix, Vec<f64>)> {
        let groups = jacobian.len();
        if groups == 0 {
            return Err(invalid("jacobian has no parameter groups"));
        }
        let rows = jacobian[0].nrows();
        for (g, j) in jacobian.iter().enumerate() {
            if j.nrows() != rows || j.block_shape().0 != jacobian[0].block_shape().0 {
                return Err(invalid(format!("jacobian group {g} has mismatched residual rows")));
            }
        }
        if residuals.len() != rows {
            return Err(invalid(format!(
                "{} residuals for a jacobian with {rows} rows",
                residuals.len()
            )));
        }
        if self.products.len() != groups * groups {
            self.products = (0..groups * groups)
                .map(|_| ProductCache::new(self.reuse))
                .collect();
            self.scalar_pattern = None;
        }

        let transposed: Vec<BsrMatrix> = jacobian.iter().map(transpose).collect();
        let before = self.product_builds();
        let mut grid = Vec::with_capacity(groups * groups);
        for g in 0..groups {
            for h in 0..groups {
                grid.push(self.products[g * groups + h].multiply(&transposed[g], &jacobian[h])?);
            }
        }
        let stale = !self.reuse || self.product_builds() != before || self.scalar_pattern.is_none();
        if stale {
            self.scalar_pattern = Some(Arc::new(flatten_pattern(&grid, groups)));
            self.flatten_builds += 1;
        }
        let pattern = Arc::clone(self.scalar_pattern.as_ref().unwrap());
        let values = flatten_values(&grid, groups, &pattern);
        let normal = BsrMatrix::new((1, 1), pattern, values)?;

        let mut gradient = Vec::with_capacity(normal.nrows());
        for t in &transposed {
            gradient.extend(spmv(t, residuals)?);
        }
        Ok((normal, gradient))
    }
}

struct GroupLayout {
    dims: Vec<usize>,
    offsets: Vec<usize>,
}

fn layout(grid: &[BsrMatrix], groups: usize) -> GroupLayout {
    let dims: Vec<usize> = (0..groups).map(|g| grid[g * groups + g].block_shape().0).collect();
    let mut offsets = vec![0usize];
    for g in 0..groups {
        offsets.push(offsets[g] + grid[g * groups + g].block_rows() * dims[g]);
    }
    GroupLayout { dims, offsets }
}

/// Calls `emit(col, product index, value index)` for every stored scalar of
/// scalar row `(g, block_row, r)`, in ascending column order.
fn for_each_in_row(
    grid: &[BsrMatrix],
    groups: usize,
    lay: &GroupLayout,
    g: usize,
    block_row: usize,
    r: usize,
    mut emit: impl FnMut(usize, usize, usize),
) {
    for h in 0..groups {
        let m = &grid[g * groups + h];
        let dh = lay.dims[h];
        let bs = lay.dims[g] * dh;
        for k in m.row_ptr()[block_row]..m.row_ptr()[block_row + 1] {
            let bc = m.col_idx()[k] as usize;
            let base = lay.offsets[h] + bc * dh;
            for c in 0..dh {
                emit(base + c, g * groups + h, k * bs + r * dh + c);
            }
        }
    }
}

fn flatten_pattern(grid: &[BsrMatrix], groups: usize) -> BsrPattern {
    let lay = layout(grid, groups);
    let n = *lay.offsets.last().unwrap();
    let mut row_ptr = Vec::with_capacity(n + 1);
    row_ptr.push(0usize);
    let mut col_idx: Vec<u32> = Vec::new();
    for g in 0..groups {
        let rows = grid[g * groups + g].block_rows();
        for bi in 0..rows {
            for r in 0..lay.dims[g] {
                let diag = lay.offsets[g] + bi * lay.dims[g] + r;
                let mut seen_diag = false;
                for_each_in_row(grid, groups, &lay, g, bi, r, |c, _, _| {
                    if !seen_diag && c > diag {
                        col_idx.push(diag as u32);
                        seen_diag = true;
                    }
                    if c == diag {
                        seen_diag = true;
                    }
                    col_idx.push(c as u32);
                });
                if !seen_diag {
                    col_idx.push(diag as u32);
                }
                row_ptr.push(col_idx.len());
            }
        }
    }
    BsrPattern::new_unchecked(n, n, row_ptr, col_idx)
}

fn flatten_values(grid: &[BsrMatrix], groups: usize, pattern: &BsrPattern) -> Vec<f64> {
    let lay = layout(grid, groups);
    let n = pattern.block_rows();
    let mut values = vec![0.0; pattern.nnz_blocks()];

    // split into one mutable slice per scalar row
    let mut slices: Vec<&mut [f64]> = Vec::with_capacity(n);
    let mut rest = values.as_mut_slice();
    for s in 0..n {
        let len = pattern.row_ptr()[s + 1] - pattern.row_ptr()[s];
        let (head, tail) = rest.split_at_mut(len);
        slices.push(head);
        rest = tail;
    }
    // scalar row -> (group, block row, row within block)
    let coord = |s: usize| {
        let g = lay.offsets.partition_point(|&o| o <= s) - 1;
        let local = s - lay.offsets[g];
        (g, local / lay.dims[g], local % lay.dims[g])
    };
    slices.into_par_iter().enumerate().for_each(|(s, out)| {
        let (g, bi, r) = coord(s);
        let cols = pattern.row(s);
        let mut cursor = 0usize;
        for_each_in_row(grid, groups, &lay, g, bi, r, |c, m, v| {
            if cols[cursor] as usize != c {
                // inserted structural diagonal
                out[cursor] = 0.0;
                cursor += 1;
            }
            out[cursor] = grid[m].values()[v];
            cursor += 1;
        });
    });
    values
}
