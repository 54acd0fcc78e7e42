//! Sparse block matrix product split into a symbolic phase (output pattern
//! plus a multiplication table) and a numeric phase that replays the table.

use std::sync::Arc;

use rayon::prelude::*;

use super::{same_pattern, BsrMatrix, BsrPattern};
use crate::error::{invalid, Result};

/// Output pattern of `A * B` and, for each output block, the `(A block,
/// B block)` storage indices to multiply-accumulate, in ascending inner index.
#[derive(Debug, Clone)]
pub struct SymbolicProduct {
    a_pattern: Arc<BsrPattern>,
    b_pattern: Arc<BsrPattern>,
    a_shape: (usize, usize),
    b_shape: (usize, usize),
    output: Arc<BsrPattern>,
    pair_ptr: Vec<usize>,
    pairs: Vec<(usize, usize)>,
}

impl SymbolicProduct {
    pub fn output_pattern(&self) -> &Arc<BsrPattern> {
        &self.output
    }

    pub fn output_block_shape(&self) -> (usize, usize) {
        (self.a_shape.0, self.b_shape.1)
    }

    /// Contributing `(A block, B block)` pairs for output block `k`.
    pub fn pairs_for(&self, k: usize) -> &[(usize, usize)] {
        &self.pairs[self.pair_ptr[k]..self.pair_ptr[k + 1]]
    }

    pub fn total_pairs(&self) -> usize {
        self.pairs.len()
    }

    /// Whether `a` and `b` have the patterns this table was built from.
    pub fn matches(&self, a: &BsrMatrix, b: &BsrMatrix) -> bool {
        a.block_shape() == self.a_shape
            && b.block_shape() == self.b_shape
            && same_pattern(a.pattern(), &self.a_pattern)
            && same_pattern(b.pattern(), &self.b_pattern)
    }
}

pub fn spgemm_symbolic(a: &BsrMatrix, b: &BsrMatrix) -> Result<SymbolicProduct> {
    if a.block_cols() != b.block_rows() {
        return Err(invalid(format!(
            "cannot multiply {} block columns by {} block rows",
            a.block_cols(),
            b.block_rows()
        )));
    }
    if a.block_shape().1 != b.block_shape().0 {
        return Err(invalid(format!(
            "inner block dimensions differ: {:?} x {:?}",
            a.block_shape(),
            b.block_shape()
        )));
    }
    let pa = a.pattern();
    let pb = b.pattern();
    let rows = pa.block_rows();
    let cols = pb.block_cols();

    // slot[j] = position of column j in the current output row, or usize::MAX
    let mut slot = vec![usize::MAX; cols];
    let mut row_ptr = Vec::with_capacity(rows + 1);
    row_ptr.push(0usize);
    let mut col_idx: Vec<u32> = Vec::new();
    let mut pair_ptr = vec![0usize];
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let mut row_cols: Vec<u32> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();

    for i in 0..rows {
        row_cols.clear();
        for &k in pa.row(i) {
            for &j in pb.row(k as usize) {
                if slot[j as usize] == usize::MAX {
                    slot[j as usize] = 0;
                    row_cols.push(j);
                }
            }
        }
        row_cols.sort_unstable();
        counts.clear();
        counts.resize(row_cols.len(), 0);
        for (p, &j) in row_cols.iter().enumerate() {
            slot[j as usize] = p;
        }
        for &k in pa.row(i) {
            for &j in pb.row(k as usize) {
                counts[slot[j as usize]] += 1;
            }
        }
        // prefix offsets within this row's slice of `pairs`
        let base = pairs.len();
        let mut fill: Vec<usize> = Vec::with_capacity(row_cols.len());
        let mut acc = base;
        for &c in &counts {
            fill.push(acc);
            acc += c;
            pair_ptr.push(acc);
        }
        pairs.resize(acc, (0, 0));
        // A's row is sorted by k, so each output block receives pairs in ascending k
        for ka in pa.row_ptr()[i]..pa.row_ptr()[i + 1] {
            let k = pa.col_idx()[ka] as usize;
            for kb in pb.row_ptr()[k]..pb.row_ptr()[k + 1] {
                let p = slot[pb.col_idx()[kb] as usize];
                pairs[fill[p]] = (ka, kb);
                fill[p] += 1;
            }
        }
        for &j in &row_cols {
            slot[j as usize] = usize::MAX;
        }
        col_idx.extend_from_slice(&row_cols);
        row_ptr.push(col_idx.len());
    }

    Ok(SymbolicProduct {
        a_pattern: Arc::clone(pa),
        b_pattern: Arc::clone(pb),
        a_shape: a.block_shape(),
        b_shape: b.block_shape(),
        output: Arc::new(BsrPattern::new_unchecked(rows, cols, row_ptr, col_idx)),
        pair_ptr,
        pairs,
    })
}

/// `C = A * B` using a precomputed table.
pub fn spgemm_numeric(table: &SymbolicProduct, a: &BsrMatrix, b: &BsrMatrix) -> Result<BsrMatrix> {
    let mut out = BsrMatrix::zeros(table.output_block_shape(), Arc::clone(&table.output));
    spgemm_numeric_into(table, a, b, &mut out)?;
    Ok(out)
}

/// In-place variant of [`spgemm_numeric`]; `out` must carry the table's
/// output pattern.
pub fn spgemm_numeric_into(
    table: &SymbolicProduct,
    a: &BsrMatrix,
    b: &BsrMatrix,
    out: &mut BsrMatrix,
) -> Result<()> {
    let a_len = table.a_pattern.nnz_blocks() * table.a_shape.0 * table.a_shape.1;
    let b_len = table.b_pattern.nnz_blocks() * table.b_shape.0 * table.b_shape.1;
    if a.values().len() != a_len || b.values().len() != b_len {
        return Err(invalid(format!(
            "operand values ({}, {}) do not match the symbolic product ({a_len}, {b_len})",
            a.values().len(),
            b.values().len()
        )));
    }
    if !table.matches(a, b) {
        return Err(invalid("operand patterns differ from the symbolic product"));
    }
    if out.block_shape() != table.output_block_shape()
        || !same_pattern(out.pattern(), &table.output)
    {
        return Err(invalid("output matrix does not carry the product pattern"));
    }
    let (m, inner) = table.a_shape;
    let n = table.b_shape.1;
    let a_bs = m * inner;
    let b_bs = inner * n;
    let av = a.values();
    let bv = b.values();
    let kernel = |(k, c): (usize, &mut [f64])| {
        c.fill(0.0);
        for &(ia, ib) in table.pairs_for(k) {
            let ab = &av[ia * a_bs..(ia + 1) * a_bs];
            let bb = &bv[ib * b_bs..(ib + 1) * b_bs];
            for i in 0..m {
                let arow = &ab[i * inner..(i + 1) * inner];
                let crow = &mut c[i * n..(i + 1) * n];
                for (t, &aval) in arow.iter().enumerate() {
                    let brow = &bb[t * n..(t + 1) * n];
                    for (cv, &bval) in crow.iter_mut().zip(brow) {
                        *cv += aval * bval;
                    }
                }
            }
        }
    };
    let bs = m * n;
    if table.pairs.len() < 2048 {
        out.values_mut().chunks_mut(bs).enumerate().for_each(kernel);
    } else {
        out.values_mut()
            .par_chunks_mut(bs)
            .enumerate()
            .for_each(kernel);
    }
    Ok(())
}

/// Caches the symbolic phase of one product across repeated numeric calls.
#[derive(Debug, Clone)]
pub struct ProductCache {
    table: Option<SymbolicProduct>,
    symbolic_builds: usize,
    reuse: bool,
}

impl Default for ProductCache {
    fn default() -> Self {
        Self::new(true)
    }
}

impl ProductCache {
    /// With `reuse = false` the symbolic phase is redone on every call.
    pub fn new(reuse: bool) -> Self {
        Self {
            table: None,
            symbolic_builds: 0,
            reuse,
        }
    }

    pub fn symbolic_builds(&self) -> usize {
        self.symbolic_builds
    }

    pub fn table(&self) -> Option<&SymbolicProduct> {
        self.table.as_ref()
    }

    fn ensure(&mut self, a: &BsrMatrix, b: &BsrMatrix) -> Result<&SymbolicProduct> {
        let stale = match &self.table {
            Some(t) => !self.reuse || !t.matches(a, b),
            None => true,
        };
        if stale {
            self.table = Some(spgemm_symbolic(a, b)?);
            self.symbolic_builds += 1;
        }
        Ok(self.table.as_ref().unwrap())
    }

    pub fn multiply(&mut self, a: &BsrMatrix, b: &BsrMatrix) -> Result<BsrMatrix> {
        let table = self.ensure(a, b)?;
        spgemm_numeric(table, a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn pattern_of(rows: usize, cols: usize, blocks: &[(usize, usize)]) -> BsrMatrix {
        let ones = [1.0];
        let t: Vec<_> = blocks.iter().map(|&(r, c)| (r, c, &ones[..])).collect();
        BsrMatrix::from_triplets((1, 1), rows, cols, &t).unwrap()
    }

    #[test]
    fn single_block_product() {
        let a = pattern_of(1, 1, &[(0, 0)]);
        let s = spgemm_symbolic(&a, &a).unwrap();
        assert_eq!(s.output_pattern().col_idx(), &[0]);
        assert_eq!(s.pairs_for(0), &[(0, 0)]);
    }

    #[test]
    fn outer_product_pattern() {
        let a = pattern_of(2, 1, &[(0, 0), (1, 0)]);
        let b = pattern_of(1, 2, &[(0, 0), (0, 1)]);
        let s = spgemm_symbolic(&a, &b).unwrap();
        let out: Vec<_> = s.output_pattern().entries().collect();
        // brute-force boolean product
        let mut expect = Vec::new();
        for i in 0..2 {
            for j in 0..2 {
                if a.pattern().find(i, 0).is_some() && b.pattern().find(0, j).is_some() {
                    expect.push((i, j));
                }
            }
        }
        assert_eq!(out, expect);
        for k in 0..4 {
            assert_eq!(s.pairs_for(k).len(), 1);
        }
    }

    #[test]
    fn numeric_small_dense() {
        let a = BsrMatrix::from_dense(&DMatrix::from_row_slice(2, 2, &[1., 0., 2., 3.]), (1, 1)).unwrap();
        let b = BsrMatrix::from_dense(&DMatrix::from_row_slice(2, 2, &[4., 1., 0., 2.]), (1, 1)).unwrap();
        let s = spgemm_symbolic(&a, &b).unwrap();
        let c = spgemm_numeric(&s, &a, &b).unwrap();
        assert_eq!(c.to_dense().unwrap(), DMatrix::from_row_slice(2, 2, &[4., 1., 8., 8.]));
    }

    #[test]
    fn identity_times_b() {
        let b = BsrMatrix::from_triplets((2, 3), 2, 3, &[(0, 2, &[1., 2., 3., 4., 5., 6.]), (1, 0, &[-1.; 6])])
            .unwrap();
        let i = BsrMatrix::identity(2, 2);
        let s = spgemm_symbolic(&i, &b).unwrap();
        assert_eq!(spgemm_numeric(&s, &i, &b).unwrap().to_dense().unwrap(), b.to_dense().unwrap());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let a = pattern_of(2, 3, &[(0, 0)]);
        let b = pattern_of(2, 2, &[(0, 0)]);
        assert!(spgemm_symbolic(&a, &b).is_err());
        let c = BsrMatrix::identity(3, 2);
        assert!(spgemm_symbolic(&a, &c).is_err());
    }

    #[test]
    fn drifted_operand_is_rejected() {
        let a = pattern_of(2, 2, &[(0, 0), (1, 1)]);
        let s = spgemm_symbolic(&a, &a).unwrap();
        let other = pattern_of(2, 2, &[(0, 0), (0, 1), (1, 1)]);
        assert!(spgemm_numeric(&s, &other, &a).is_err());
    }

    #[test]
    fn cache_builds_symbolic_once() {
        let a = pattern_of(3, 3, &[(0, 0), (0, 2), (1, 1), (2, 0)]);
        let mut cache = ProductCache::default();
        for step in 0..100 {
            let mut a2 = a.clone();
            for v in a2.values_mut() {
                *v = step as f64;
            }
            let c = cache.multiply(&a2, &a2).unwrap();
            let d = a2.to_dense().unwrap();
            assert_eq!(c.to_dense().unwrap(), &d * &d);
        }
        assert_eq!(cache.symbolic_builds(), 1);

        let mut fresh = ProductCache::new(false);
        for _ in 0..5 {
            fresh.multiply(&a, &a).unwrap();
        }
        assert_eq!(fresh.symbolic_builds(), 5);
    }
}
