//! Sparse up-looking Cholesky `P A P^T = L L^T` with a reusable symbolic
//! phase (ordering, elimination tree, fill pattern, scatter maps).

use std::sync::Arc;

use super::{relative_residual, SolveStats};
use crate::error::{invalid, Error, Result};
use crate::sparse::{BsrMatrix, BsrPattern};

/// Residual bound a direct solve is expected to meet.
pub const DIRECT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ordering {
    /// Identity permutation.
    Natural,
    /// Approximate minimum degree.
    #[default]
    Amd,
}

/// Everything about the factorization that depends only on the pattern.
#[derive(Debug, Clone)]
pub struct SymbolicFactor {
    pattern: Arc<BsrPattern>,
    n: usize,
    /// `perm[k]` is the original index eliminated `k`-th.
    perm: Vec<usize>,
    inv_perm: Vec<usize>,
    parent: Vec<Option<usize>>,
    /// Column `j` of `L` lives in `l_ptr[j]..l_ptr[j+1]`, diagonal first,
    /// then rows in increasing order.
    l_ptr: Vec<usize>,
    l_idx: Vec<usize>,
    /// Permuted upper triangle: for column `k`, `(row, index into A values)`.
    c_ptr: Vec<usize>,
    c_entries: Vec<(usize, usize)>,
    /// Row `k` of `L` off the diagonal in topological order: `(column, slot)`.
    r_ptr: Vec<usize>,
    r_entries: Vec<(usize, usize)>,
}

impl SymbolicFactor {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    /// `inverse_permutation()[i]` is the elimination step of original index `i`.
    pub fn inverse_permutation(&self) -> &[usize] {
        &self.inv_perm
    }

    /// Elimination tree over permuted indices; `None` marks a root.
    pub fn parent(&self) -> &[Option<usize>] {
        &self.parent
    }

    pub fn l_nnz(&self) -> usize {
        self.l_idx.len()
    }

    /// Row indices of column `j` of `L` (permuted numbering).
    pub fn l_column(&self, j: usize) -> &[usize] {
        &self.l_idx[self.l_ptr[j]..self.l_ptr[j + 1]]
    }

    pub fn pattern(&self) -> &Arc<BsrPattern> {
        &self.pattern
    }

    pub fn matches(&self, a: &BsrMatrix) -> bool {
        a.block_shape() == (1, 1) && crate::sparse::same_pattern(a.pattern(), &self.pattern)
    }
}

fn check_scalar_square(a: &BsrMatrix) -> Result<()> {
    if a.block_shape() != (1, 1) {
        return Err(invalid("the direct solver expects a scalar (1x1 block) matrix"));
    }
    if a.block_rows() != a.block_cols() {
        return Err(invalid(format!(
            "matrix is {}x{}, not square",
            a.block_rows(),
            a.block_cols()
        )));
    }
    Ok(())
}

/// Computes ordering and fill from the pattern of `a` alone.
pub fn cholesky_symbolic(a: &BsrMatrix, ordering: Ordering) -> Result<SymbolicFactor> {
    check_scalar_square(a)?;
    let pat = a.pattern();
    let n = pat.block_rows();
    for r in 0..n {
        if pat.find(r, r).is_none() {
            return Err(invalid(format!("structurally singular: no diagonal entry in row {r}")));
        }
        for &c in pat.row(r) {
            if pat.find(c as usize, r).is_none() {
                return Err(invalid(format!("pattern is not symmetric at ({r}, {c})")));
            }
        }
    }

    let perm: Vec<usize> = match ordering {
        Ordering::Natural => (0..n).collect(),
        Ordering::Amd if n == 0 => Vec::new(),
        Ordering::Amd => {
            let ap: Vec<usize> = pat.row_ptr().to_vec();
            let ai: Vec<usize> = pat.col_idx().iter().map(|&c| c as usize).collect();
            let (p, _, _) = amd::order(n, &ap, &ai, &amd::Control::default())
                .map_err(|s| invalid(format!("minimum degree ordering failed: {s:?}")))?;
            p
        }
    };
    let mut inv_perm = vec![0usize; n];
    for (k, &p) in perm.iter().enumerate() {
        inv_perm[p] = k;
    }

    // upper triangle of C = P A P^T, by column
    let mut c_ptr = vec![0usize; n + 1];
    for r in 0..n {
        for &c in pat.row(r) {
            let (i, k) = (inv_perm[r], inv_perm[c as usize]);
            if i <= k {
                c_ptr[k + 1] += 1;
            }
        }
    }
    for k in 0..n {
        c_ptr[k + 1] += c_ptr[k];
    }
    let mut cursor = c_ptr.clone();
    let mut c_entries = vec![(0usize, 0usize); c_ptr[n]];
    for r in 0..n {
        for idx in pat.row_ptr()[r]..pat.row_ptr()[r + 1] {
            let c = pat.col_idx()[idx] as usize;
            let (i, k) = (inv_perm[r], inv_perm[c]);
            if i <= k {
                c_entries[cursor[k]] = (i, idx);
                cursor[k] += 1;
            }
        }
    }
    for k in 0..n {
        c_entries[c_ptr[k]..c_ptr[k + 1]].sort_unstable();
    }

    // elimination tree with path compression
    let mut parent = vec![None; n];
    let mut ancestor: Vec<Option<usize>> = vec![None; n];
    for k in 0..n {
        for &(i0, _) in &c_entries[c_ptr[k]..c_ptr[k + 1]] {
            let mut i = Some(i0);
            while let Some(ii) = i.filter(|&ii| ii < k) {
                let next = ancestor[ii];
                ancestor[ii] = Some(k);
                if next.is_none() {
                    parent[ii] = Some(k);
                }
                i = next;
            }
        }
    }

    // row patterns of L via reachability in the etree
    let mut mark = vec![usize::MAX; n];
    let mut stack = Vec::new();
    let mut rows: Vec<usize> = Vec::new();
    let mut r_ptr = vec![0usize; n + 1];
    let mut col_count = vec![1usize; n];
    for k in 0..n {
        let start = rows.len();
        mark[k] = k;
        let mut top = Vec::new();
        for &(i0, _) in &c_entries[c_ptr[k]..c_ptr[k + 1]] {
            let mut i = i0;
            stack.clear();
            while mark[i] != k {
                stack.push(i);
                mark[i] = k;
                match parent[i] {
                    Some(p) => i = p,
                    None => break,
                }
            }
            // prepend the path so the result stays topologically ordered
            while let Some(s) = stack.pop() {
                top.push(s);
            }
        }
        // `top` was built as successive reversed pushes; cs_ereach order is
        // the reverse of the accumulated sequence
        top.reverse();
        for &j in &top {
            col_count[j] += 1;
        }
        rows.extend(top);
        r_ptr[k + 1] = rows.len();
        debug_assert!(rows[start..].iter().all(|&j| j < k));
    }

    let mut l_ptr = vec![0usize; n + 1];
    for j in 0..n {
        l_ptr[j + 1] = l_ptr[j] + col_count[j];
    }
    let mut l_idx = vec![0usize; l_ptr[n]];
    let mut next: Vec<usize> = (0..n).map(|j| l_ptr[j] + 1).collect();
    for j in 0..n {
        l_idx[l_ptr[j]] = j;
    }
    let mut r_entries = Vec::with_capacity(rows.len());
    for k in 0..n {
        for &j in &rows[r_ptr[k]..r_ptr[k + 1]] {
            let slot = next[j];
            next[j] += 1;
            l_idx[slot] = k;
            r_entries.push((j, slot));
        }
    }

    Ok(SymbolicFactor {
        pattern: Arc::clone(pat),
        n,
        perm,
        inv_perm,
        parent,
        l_ptr,
        l_idx,
        c_ptr,
        c_entries,
        r_ptr,
        r_entries,
    })
}

/// Numeric values of `L` for a fixed symbolic factor.
#[derive(Debug, Clone)]
pub struct NumericFactor {
    symbolic: Arc<SymbolicFactor>,
    l_val: Vec<f64>,
}

impl NumericFactor {
    pub fn symbolic(&self) -> &SymbolicFactor {
        &self.symbolic
    }

    /// Values of `L` in the layout of [`SymbolicFactor::l_column`].
    pub fn l_values(&self) -> &[f64] {
        &self.l_val
    }

    /// Solves `A x = b` with the stored factor.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let s = &*self.symbolic;
        if b.len() != s.n {
            return Err(invalid(format!("rhs has length {}, expected {}", b.len(), s.n)));
        }
        let l = &self.l_val;
        let mut y: Vec<f64> = s.perm.iter().map(|&p| b[p]).collect();
        for j in 0..s.n {
            let (lo, hi) = (s.l_ptr[j], s.l_ptr[j + 1]);
            y[j] /= l[lo];
            let yj = y[j];
            for p in lo + 1..hi {
                y[s.l_idx[p]] -= l[p] * yj;
            }
        }
        for j in (0..s.n).rev() {
            let (lo, hi) = (s.l_ptr[j], s.l_ptr[j + 1]);
            let mut acc = y[j];
            for p in lo + 1..hi {
                acc -= l[p] * y[s.l_idx[p]];
            }
            y[j] = acc / l[lo];
        }
        let mut x = vec![0.0; s.n];
        for (k, &p) in s.perm.iter().enumerate() {
            x[p] = y[k];
        }
        Ok(x)
    }
}

/// Numeric factorization. A non-positive pivot reports its index in the
/// original (unpermuted) numbering.
pub fn cholesky_numeric(sym: &Arc<SymbolicFactor>, a: &BsrMatrix) -> Result<NumericFactor> {
    if !sym.matches(a) {
        return Err(invalid("matrix pattern differs from the symbolic factor"));
    }
    let n = sym.n;
    let av = a.values();
    let mut l = vec![0.0; sym.l_idx.len()];
    let mut x = vec![0.0; n];
    for k in 0..n {
        for &(i, idx) in &sym.c_entries[sym.c_ptr[k]..sym.c_ptr[k + 1]] {
            x[i] = av[idx];
        }
        let mut d = x[k];
        x[k] = 0.0;
        for &(j, slot) in &sym.r_entries[sym.r_ptr[k]..sym.r_ptr[k + 1]] {
            let lkj = x[j] / l[sym.l_ptr[j]];
            x[j] = 0.0;
            for p in sym.l_ptr[j] + 1..slot {
                x[sym.l_idx[p]] -= l[p] * lkj;
            }
            d -= lkj * lkj;
            l[slot] = lkj;
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotSpd { pivot: sym.perm[k] });
        }
        l[sym.l_ptr[k]] = d.sqrt();
    }
    Ok(NumericFactor {
        symbolic: Arc::clone(sym),
        l_val: l,
    })
}

/// One-shot factor and solve with a precomputed symbolic factor.
pub fn cholesky_solve(sym: &Arc<SymbolicFactor>, a: &BsrMatrix, b: &[f64]) -> Result<(Vec<f64>, SolveStats)> {
    let x = cholesky_numeric(sym, a)?.solve(b)?;
    let rel = relative_residual(a, &x, b)?;
    Ok((
        x,
        SolveStats {
            iterations: 0,
            relative_residual: rel,
            converged: rel <= DIRECT_TOL,
        },
    ))
}

/// Direct solver that caches its symbolic factor across calls with the same
/// pattern.
#[derive(Debug, Clone)]
pub struct CholeskySolver {
    ordering: Ordering,
    reuse: bool,
    symbolic: Option<Arc<SymbolicFactor>>,
    symbolic_builds: usize,
}

impl CholeskySolver {
    pub fn new(ordering: Ordering, reuse: bool) -> Self {
        Self {
            ordering,
            reuse,
            symbolic: None,
            symbolic_builds: 0,
        }
    }

    pub fn symbolic_builds(&self) -> usize {
        self.symbolic_builds
    }

    pub fn symbolic(&mut self, a: &BsrMatrix) -> Result<Arc<SymbolicFactor>> {
        match &self.symbolic {
            Some(s) if self.reuse && s.matches(a) => Ok(Arc::clone(s)),
            _ => {
                let s = Arc::new(cholesky_symbolic(a, self.ordering)?);
                self.symbolic_builds += 1;
                self.symbolic = Some(Arc::clone(&s));
                Ok(s)
            }
        }
    }

    pub fn solve(&mut self, a: &BsrMatrix, b: &[f64]) -> Result<(Vec<f64>, SolveStats)> {
        let sym = self.symbolic(a)?;
        cholesky_solve(&sym, a, b)
    }
}

impl Default for CholeskySolver {
    fn default() -> Self {
        Self::new(Ordering::Amd, true)
    }
}
