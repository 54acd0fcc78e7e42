//! Sparsity-aware reverse-mode differentiation.
//!
//! A residual model runs eagerly against a [`TraceGraph`]. Two kinds of edges
//! are recorded:
//!
//! * **gather** edges (`out[k] = src[indices[k]]`) replicate parameters so each
//!   residual row owns a private copy of what it reads. They carry no
//!   arithmetic; on the way back they only route blocks to columns.
//! * **op** edges apply one of the row-wise operations in [`Op`]. They carry
//!   no indexing; on the way back they produce block values.
//!
//! [`sparse_jacobian`] walks the graph once in reverse creation order and
//! emits one [`BsrMatrix`] per parameter group whose block `(k, j)` is
//! `d r_k / d theta_j` in the entity's tangent coordinates. A dense Jacobian
//! is never formed.

mod backward;
mod ops;
mod params;

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};

pub use backward::{sparse_jacobian, SparseJacobian};
pub use ops::{Op, ValueKind, BAL_MIN_DEPTH, PINHOLE_MIN_DEPTH};
pub use params::{ParamGroup, ParamKind, ParamSet};

/// Handle to a node of a [`TraceGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Traced {
    id: usize,
}

impl Traced {
    pub fn id(&self) -> usize {
        self.id
    }
}

#[derive(Debug, Clone)]
pub enum Provenance {
    /// Values of parameter group `group`.
    Leaf { group: usize },
    /// Data with no derivative (observations, intrinsics, measurements).
    Constant,
    Gather { parent: usize, indices: Arc<[u32]> },
    Op { op: Op, parents: Vec<usize> },
    /// Forward-only computation with no registered derivative.
    Opaque { name: String, parents: Vec<usize> },
}

#[derive(Debug, Clone)]
pub struct Node {
    kind: ValueKind,
    rows: usize,
    values: Vec<f64>,
    provenance: Provenance,
    requires_grad: bool,
}

impl Node {
    pub fn kind(&self) -> ValueKind {
        self.kind
    }
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }
    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
    fn row(&self, k: usize) -> &[f64] {
        let w = self.kind.width();
        &self.values[k * w..(k + 1) * w]
    }
}

/// Append-only record of a forward pass. Creation order is a topological
/// order because every node's parents exist before it.
#[derive(Debug, Clone, Default)]
pub struct TraceGraph {
    nodes: Vec<Node>,
}

impl TraceGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, t: Traced) -> &Node {
        &self.nodes[t.id]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn values(&self, t: Traced) -> &[f64] {
        &self.nodes[t.id].values
    }

    pub fn rows(&self, t: Traced) -> usize {
        self.nodes[t.id].rows
    }

    pub fn kind(&self, t: Traced) -> ValueKind {
        self.nodes[t.id].kind
    }

    fn push(&mut self, node: Node) -> Traced {
        self.nodes.push(node);
        Traced {
            id: self.nodes.len() - 1,
        }
    }

    fn check(&self, t: Traced) -> Result<&Node> {
        self.nodes
            .get(t.id)
            .ok_or_else(|| invalid(format!("node {} does not belong to this graph", t.id)))
    }

    /// Registers the values of a parameter group as a leaf.
    pub fn track(&mut self, group: &ParamGroup) -> Result<Traced> {
        let kind = match group.kind {
            ParamKind::Pose => ValueKind::Pose,
            ParamKind::Euclidean(d) => ValueKind::Vector(d),
        };
        let w = kind.width();
        if group.values().len() != group.count() * w {
            return Err(invalid(format!(
                "group {} has {} values for {} entities of width {w}",
                group.id,
                group.values().len(),
                group.count()
            )));
        }
        Ok(self.push(Node {
            kind,
            rows: group.count(),
            values: group.values().to_vec(),
            provenance: Provenance::Leaf { group: group.id },
            requires_grad: true,
        }))
    }

    /// Adds non-differentiable data.
    pub fn constant(&mut self, kind: ValueKind, values: Vec<f64>) -> Result<Traced> {
        let w = kind.width();
        if w == 0 || values.len() % w != 0 {
            return Err(invalid(format!(
                "{} values do not form rows of width {w}",
                values.len()
            )));
        }
        Ok(self.push(Node {
            kind,
            rows: values.len() / w,
            values,
            provenance: Provenance::Constant,
            requires_grad: false,
        }))
    }

    /// `out[k] = src[indices[k]]`.
    pub fn gather(&mut self, src: Traced, indices: impl Into<Arc<[u32]>>) -> Result<Traced> {
        let indices: Arc<[u32]> = indices.into();
        let node = self.check(src)?;
        let len = node.rows;
        if let Some((position, &index)) = indices
            .iter()
            .enumerate()
            .find(|(_, &i)| i as usize >= len)
        {
            return Err(Error::IndexOutOfRange {
                position,
                index: index as usize,
                len,
            });
        }
        let w = node.kind.width();
        let mut values = vec![0.0; indices.len() * w];
        values
            .par_chunks_mut(w.max(1))
            .zip(indices.par_iter())
            .for_each(|(out, &i)| out.copy_from_slice(node.row(i as usize)));
        let (kind, requires_grad) = (node.kind, node.requires_grad);
        Ok(self.push(Node {
            kind,
            rows: indices.len(),
            values,
            provenance: Provenance::Gather {
                parent: src.id,
                indices,
            },
            requires_grad,
        }))
    }

    /// Applies a registered row-wise op.
    pub fn apply(&mut self, op: Op, parents: &[Traced]) -> Result<Traced> {
        let mut kinds = Vec::with_capacity(parents.len());
        let mut rows = None;
        for &p in parents {
            let n = self.check(p)?;
            kinds.push(n.kind);
            match rows {
                None => rows = Some(n.rows),
                Some(r) if r != n.rows => {
                    return Err(invalid(format!(
                        "{} parents have {r} and {} rows",
                        op.name(),
                        n.rows
                    )))
                }
                _ => {}
            }
        }
        let kind = op.output_kind(&kinds)?;
        let rows = rows.unwrap_or(0);
        let w = kind.width();
        let inputs: Vec<&Node> = parents.iter().map(|p| &self.nodes[p.id]).collect();
        let mut values = vec![0.0; rows * w];
        values
            .par_chunks_mut(w)
            .enumerate()
            .try_for_each(|(k, out)| {
                let row: Vec<&[f64]> = inputs.iter().map(|n| n.row(k)).collect();
                op.forward_row(k, &row, out)
            })
            .map_err(|e| first_row_error(e, &op, &inputs))?;
        let requires_grad = inputs.iter().any(|n| n.requires_grad);
        Ok(self.push(Node {
            kind,
            rows,
            values,
            provenance: Provenance::Op {
                op,
                parents: parents.iter().map(|p| p.id).collect(),
            },
            requires_grad,
        }))
    }

    /// Records a forward-only computation. Evaluation works; differentiating
    /// through it fails with [`Error::UnsupportedOperation`].
    pub fn opaque(
        &mut self,
        name: &str,
        parents: &[Traced],
        kind: ValueKind,
        values: Vec<f64>,
    ) -> Result<Traced> {
        let mut requires_grad = false;
        for &p in parents {
            requires_grad |= self.check(p)?.requires_grad;
        }
        let w = kind.width();
        if w == 0 || values.len() % w != 0 {
            return Err(invalid("opaque values do not form whole rows"));
        }
        Ok(self.push(Node {
            kind,
            rows: values.len() / w,
            values,
            provenance: Provenance::Opaque {
                name: name.to_string(),
                parents: parents.iter().map(|p| p.id).collect(),
            },
            requires_grad,
        }))
    }

    /// Scatter-add mixes indexing with arithmetic, so it cannot be classified
    /// as either edge kind and is refused.
    pub fn scatter_add(&mut self, _src: Traced, _indices: &[u32], _rows: usize) -> Result<Traced> {
        Err(Error::UnsupportedOperation(
            "scatter_add mixes indexing and arithmetic".into(),
        ))
    }

    pub fn act(&mut self, pose: Traced, point: Traced) -> Result<Traced> {
        self.apply(Op::Act, &[pose, point])
    }

    pub fn pinhole_project(&mut self, point: Traced, k: crate::problems::Pinhole) -> Result<Traced> {
        self.apply(Op::PinholeProject(k), &[point])
    }

    /// `intrinsics` rows are `[f, k1, k2]` and must not require gradients.
    pub fn bal_project(&mut self, point: Traced, intrinsics: Traced) -> Result<Traced> {
        self.apply(Op::BalProject, &[point, intrinsics])
    }

    /// `log(a^-1 b m)`, optionally premultiplied by a per-row 6x6 matrix.
    pub fn relative_pose_log(
        &mut self,
        a: Traced,
        b: Traced,
        inv_measurement: Traced,
        whitening: Option<Traced>,
    ) -> Result<Traced> {
        match whitening {
            Some(w) => self.apply(Op::RelativePoseLog { weighted: true }, &[a, b, inv_measurement, w]),
            None => self.apply(Op::RelativePoseLog { weighted: false }, &[a, b, inv_measurement]),
        }
    }

    pub fn add(&mut self, a: Traced, b: Traced) -> Result<Traced> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Traced, b: Traced) -> Result<Traced> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Traced, b: Traced) -> Result<Traced> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Traced, s: f64) -> Result<Traced> {
        self.apply(Op::Scale(s), &[a])
    }

    pub fn offset(&mut self, a: Traced, c: f64) -> Result<Traced> {
        self.apply(Op::Offset(c), &[a])
    }
}

/// `try_for_each` may surface any failing row; report the smallest one so
/// errors do not depend on scheduling.
fn first_row_error(e: Error, op: &Op, inputs: &[&Node]) -> Error {
    let rows = inputs.first().map(|n| n.rows).unwrap_or(0);
    let w = op
        .output_kind(&inputs.iter().map(|n| n.kind).collect::<Vec<_>>())
        .map(|k| k.width())
        .unwrap_or(0);
    let mut out = vec![0.0; w];
    for k in 0..rows {
        let row: Vec<&[f64]> = inputs.iter().map(|n| n.row(k)).collect();
        if let Err(first) = op.forward_row(k, &row, &mut out) {
            return first;
        }
    }
    e
}

/// A residual function written against a [`TraceGraph`].
///
/// `params` holds one leaf per group of the [`ParamSet`], in group order. The
/// returned node must be a vector kind with one row per residual block.
pub trait ResidualModel: Sync {
    fn residuals(&self, graph: &mut TraceGraph, params: &[Traced]) -> Result<Traced>;
}

impl<F> ResidualModel for F
where
    F: Fn(&mut TraceGraph, &[Traced]) -> Result<Traced> + Sync,
{
    fn residuals(&self, graph: &mut TraceGraph, params: &[Traced]) -> Result<Traced> {
        self(graph, params)
    }
}

/// Result of one forward pass.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub graph: TraceGraph,
    pub output: Traced,
}

impl Evaluation {
    pub fn residuals(&self) -> &[f64] {
        self.graph.values(self.output)
    }

    /// Residual rows (blocks), e.g. the number of observations.
    pub fn rows(&self) -> usize {
        self.graph.rows(self.output)
    }

    pub fn width(&self) -> usize {
        self.graph.kind(self.output).width()
    }

    /// `sum r^2`, accumulated in row order.
    pub fn cost(&self) -> f64 {
        self.residuals().iter().map(|r| r * r).sum()
    }
}

/// Runs `model` on `params`, recording the graph.
pub fn evaluate(model: &dyn ResidualModel, params: &ParamSet) -> Result<Evaluation> {
    let mut graph = TraceGraph::new();
    let leaves = params
        .groups()
        .iter()
        .map(|g| graph.track(g))
        .collect::<Result<Vec<_>>>()?;
    let output = model.residuals(&mut graph, &leaves)?;
    graph.check(output)?;
    if let ValueKind::Pose = graph.kind(output) {
        return Err(invalid("residual output must be a vector, not a pose"));
    }
    Ok(Evaluation { graph, output })
}
