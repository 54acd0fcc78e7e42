//! The single backward pass that turns a [`TraceGraph`] into block-sparse
//! Jacobians.
//!
//! Every node that the output depends on receives a list of contributions.
//! A contribution pairs a row map (which row of this node each residual row
//! reads) with one dense `m x t` sensitivity block per residual row. Gathers
//! compose the row map and leave the blocks alone; ops multiply the blocks by
//! their local Jacobians and leave the map alone.

use std::sync::Arc;

use rayon::prelude::*;

use super::{Evaluation, Node, ParamGroup, ParamSet, Provenance};
use crate::error::{invalid, Error, Result};
use crate::sparse::BsrMatrix;

/// Residual rows below this are processed serially.
const PAR_ROWS: usize = 1024;

#[derive(Debug, Clone)]
enum RowMap {
    Identity,
    Indexed(Arc<[u32]>),
}

impl RowMap {
    #[inline]
    fn get(&self, k: usize) -> usize {
        match self {
            RowMap::Identity => k,
            RowMap::Indexed(ix) => ix[k] as usize,
        }
    }

    fn same(&self, other: &RowMap) -> bool {
        match (self, other) {
            (RowMap::Identity, RowMap::Identity) => true,
            (RowMap::Indexed(a), RowMap::Indexed(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }

    /// Map after passing through `out[k] = src[indices[k]]`.
    fn through(&self, indices: &Arc<[u32]>) -> RowMap {
        match self {
            RowMap::Identity => RowMap::Indexed(Arc::clone(indices)),
            RowMap::Indexed(m) => RowMap::Indexed(m.iter().map(|&k| indices[k as usize]).collect()),
        }
    }
}

#[derive(Debug, Clone)]
struct Contribution {
    map: RowMap,
    /// `rows * m * t`, one row-major `m x t` block per residual row.
    sens: Vec<f64>,
}

/// Jacobian of the residual rows, one BSR matrix per parameter group.
///
/// Group `g` has blocks of shape `m x tangent_dim(g)` where `m` is the
/// residual width; block column `j` is the `j`-th free entity of the group.
#[derive(Debug, Clone)]
pub struct SparseJacobian {
    pub blocks: Vec<BsrMatrix>,
    /// Node ids in the order the backward pass visited them.
    pub visit_order: Vec<usize>,
}

impl SparseJacobian {
    pub fn group(&self, g: usize) -> &BsrMatrix {
        &self.blocks[g]
    }

    /// `[J_0 | J_1 | ...]` as a dense matrix, for tests and small problems.
    pub fn to_dense(&self) -> Result<nalgebra::DMatrix<f64>> {
        let parts = self
            .blocks
            .iter()
            .map(|b| b.to_dense())
            .collect::<Result<Vec<_>>>()?;
        let rows = parts.first().map(|p| p.nrows()).unwrap_or(0);
        let cols = parts.iter().map(|p| p.ncols()).sum();
        let mut out = nalgebra::DMatrix::zeros(rows, cols);
        let mut off = 0;
        for p in &parts {
            out.view_mut((0, off), (rows, p.ncols())).copy_from(p);
            off += p.ncols();
        }
        Ok(out)
    }
}

/// Differentiates `eval` with respect to every group of `params`.
pub fn sparse_jacobian(eval: &Evaluation, params: &ParamSet) -> Result<SparseJacobian> {
    let graph = &eval.graph;
    let out = eval.output.id;
    let n = graph.rows(eval.output);
    let m = graph.kind(eval.output).tangent();

    for node in graph.nodes() {
        if let Provenance::Leaf { group } = node.provenance {
            let ok = params
                .groups()
                .get(group)
                .is_some_and(|g| g.count() == node.rows && g.tangent_dim() == node.kind.tangent());
            if !ok {
                return Err(invalid(format!("leaf for group {group} does not match the parameter set")));
            }
        }
    }

    let mut pending: Vec<Vec<Contribution>> = vec![Vec::new(); graph.len()];
    let mut seed = vec![0.0; n * m * m];
    seed.par_chunks_mut(m * m).for_each(|b| {
        for i in 0..m {
            b[i * m + i] = 1.0;
        }
    });
    pending[out].push(Contribution {
        map: RowMap::Identity,
        sens: seed,
    });

    let mut per_group: Vec<Vec<Contribution>> = vec![Vec::new(); params.groups().len()];
    let mut visit_order = Vec::new();

    for id in (0..=out).rev() {
        let incoming = std::mem::take(&mut pending[id]);
        if incoming.is_empty() {
            continue;
        }
        visit_order.push(id);
        let node = &graph.nodes()[id];
        let merged = merge(incoming);
        match &node.provenance {
            Provenance::Leaf { group } => per_group[*group].extend(merged),
            Provenance::Constant => {}
            Provenance::Gather { parent, indices } => {
                if graph.nodes()[*parent].requires_grad {
                    for c in merged {
                        pending[*parent].push(Contribution {
                            map: c.map.through(indices),
                            sens: c.sens,
                        });
                    }
                }
            }
            Provenance::Op { op, parents } => {
                let t_out = node.kind.tangent();
                for (slot, &p) in parents.iter().enumerate() {
                    let pnode = &graph.nodes()[p];
                    if !pnode.requires_grad {
                        continue;
                    }
                    if !op.differentiable_in(slot) {
                        return Err(Error::UnsupportedOperation(format!(
                            "{} has no derivative with respect to input {slot}",
                            op.name()
                        )));
                    }
                    let t_in = pnode.kind.tangent();
                    let inputs: Vec<&Node> = parents.iter().map(|&q| &graph.nodes()[q]).collect();
                    for c in &merged {
                        let sens = chain(n, m, t_out, t_in, &c.sens, |k, local| {
                            let r = c.map.get(k);
                            let row: Vec<&[f64]> = inputs.iter().map(|x| x.row(r)).collect();
                            op.local_block(slot, &row, node.row(r), local);
                        });
                        pending[p].push(Contribution {
                            map: c.map.clone(),
                            sens,
                        });
                    }
                }
            }
            Provenance::Opaque { name, parents } => {
                if parents.iter().any(|&p| graph.nodes()[p].requires_grad) {
                    return Err(Error::UnsupportedOperation(format!(
                        "{name} has no registered derivative"
                    )));
                }
            }
        }
    }

    let blocks = params
        .groups()
        .iter()
        .zip(&per_group)
        .map(|(g, contribs)| assemble(n, m, g, contribs))
        .collect::<Result<Vec<_>>>()?;
    Ok(SparseJacobian { blocks, visit_order })
}

/// Sums contributions that share a row map, keeping first-arrival order.
fn merge(incoming: Vec<Contribution>) -> Vec<Contribution> {
    let mut out: Vec<Contribution> = Vec::with_capacity(incoming.len());
    for c in incoming {
        if let Some(prev) = out.iter_mut().find(|p| p.map.same(&c.map)) {
            for (a, b) in prev.sens.iter_mut().zip(&c.sens) {
                *a += b;
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// `new_k = sens_k * local_k` for every residual row `k`.
fn chain(
    n: usize,
    m: usize,
    t_out: usize,
    t_in: usize,
    sens: &[f64],
    local: impl Fn(usize, &mut [f64]) + Sync,
) -> Vec<f64> {
    let mut out = vec![0.0; n * m * t_in];
    let kernel = |(k, dst): (usize, &mut [f64]), scratch: &mut Vec<f64>| {
        scratch.resize(t_out * t_in, 0.0);
        local(k, scratch);
        let s = &sens[k * m * t_out..(k + 1) * m * t_out];
        for i in 0..m {
            for j in 0..t_in {
                let mut acc = 0.0;
                for l in 0..t_out {
                    acc += s[i * t_out + l] * scratch[l * t_in + j];
                }
                dst[i * t_in + j] = acc;
            }
        }
    };
    let width = (m * t_in).max(1);
    if n >= PAR_ROWS {
        out.par_chunks_mut(width)
            .enumerate()
            .for_each_init(Vec::new, |scratch, item| kernel(item, scratch));
    } else {
        let mut scratch = Vec::new();
        for item in out.chunks_mut(width).enumerate() {
            kernel(item, &mut scratch);
        }
    }
    out
}

/// Builds one group's BSR matrix. Blocks landing on the same (row, column)
/// are summed in contribution order.
fn assemble(n: usize, m: usize, group: &ParamGroup, contribs: &[Contribution]) -> Result<BsrMatrix> {
    let t = group.tangent_dim();
    let bs = m * t;
    let cols = group.free_count();

    // per-row list of (column, contribution) in contribution order
    let row_cols = |k: usize| -> Vec<(u32, usize)> {
        let mut v: Vec<(u32, usize)> = contribs
            .iter()
            .enumerate()
            .filter_map(|(ci, c)| group.column(c.map.get(k)).map(|col| (col, ci)))
            .collect();
        v.sort_by_key(|&(col, _)| col); // stable: ties keep contribution order
        v
    };
    let counts: Vec<usize> = if n >= PAR_ROWS {
        (0..n).into_par_iter().map(|k| distinct(&row_cols(k))).collect()
    } else {
        (0..n).map(|k| distinct(&row_cols(k))).collect()
    };
    let mut row_ptr = Vec::with_capacity(n + 1);
    row_ptr.push(0usize);
    for c in &counts {
        row_ptr.push(row_ptr.last().unwrap() + c);
    }
    let nnz = *row_ptr.last().unwrap();
    let mut col_idx = vec![0u32; nnz];
    let mut values = vec![0.0; nnz * bs];

    let fill = |k: usize, cdst: &mut [u32], vdst: &mut [f64]| {
        let mut slot = usize::MAX;
        let mut last = None;
        for (col, ci) in row_cols(k) {
            if last != Some(col) {
                slot = slot.wrapping_add(1);
                cdst[slot] = col;
                last = Some(col);
            }
            let src = &contribs[ci].sens[k * bs..(k + 1) * bs];
            for (d, s) in vdst[slot * bs..(slot + 1) * bs].iter_mut().zip(src) {
                *d += s;
            }
        }
    };
    let mut cslices = split(&mut col_idx, &row_ptr, 1);
    let mut vslices = split(&mut values, &row_ptr, bs);
    if n >= PAR_ROWS {
        cslices
            .par_iter_mut()
            .zip(vslices.par_iter_mut())
            .enumerate()
            .for_each(|(k, (c, v))| fill(k, c, v));
    } else {
        for (k, (c, v)) in cslices.iter_mut().zip(vslices.iter_mut()).enumerate() {
            fill(k, c, v);
        }
    }
    drop((cslices, vslices));
    BsrMatrix::from_parts((m, t), n, cols, row_ptr, col_idx, values)
}

fn distinct(v: &[(u32, usize)]) -> usize {
    v.iter().enumerate().filter(|(i, (c, _))| *i == 0 || v[i - 1].0 != *c).count()
}

fn split<'a, T>(data: &'a mut [T], row_ptr: &[usize], width: usize) -> Vec<&'a mut [T]> {
    let mut out = Vec::with_capacity(row_ptr.len().saturating_sub(1));
    let mut rest = data;
    for w in row_ptr.windows(2) {
        let (head, tail) = rest.split_at_mut((w[1] - w[0]) * width);
        out.push(head);
        rest = tail;
    }
    out
}

