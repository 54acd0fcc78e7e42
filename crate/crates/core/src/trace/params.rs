use crate::error::{invalid, Result};
use crate::lie::{PoseSE3, Tangent6, Vec3, POSE_STORAGE};

/// What one entity of a parameter group is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// SE(3) pose: 7 stored scalars, 6-dim left tangent.
    Pose,
    /// Plain vector of the given dimension; tangent equals storage.
    Euclidean(usize),
}

impl ParamKind {
    pub const POINT3: ParamKind = ParamKind::Euclidean(3);

    pub fn storage_width(&self) -> usize {
        match self {
            ParamKind::Pose => POSE_STORAGE,
            ParamKind::Euclidean(d) => *d,
        }
    }

    pub fn tangent_dim(&self) -> usize {
        match self {
            ParamKind::Pose => 6,
            ParamKind::Euclidean(d) => *d,
        }
    }
}

/// A batch of same-kind entities optimized together, e.g. all cameras.
///
/// Fixed entities keep their values and get no Jacobian column.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub id: usize,
    pub kind: ParamKind,
    values: Vec<f64>,
    fixed: Vec<bool>,
    columns: Vec<Option<u32>>,
    free_count: usize,
}

impl ParamGroup {
    fn new(id: usize, kind: ParamKind, values: Vec<f64>) -> Result<Self> {
        let w = kind.storage_width();
        if w == 0 {
            return Err(invalid("parameter kind has zero width"));
        }
        if values.is_empty() || values.len() % w != 0 {
            return Err(invalid(format!(
                "group needs a positive multiple of {w} values, got {}",
                values.len()
            )));
        }
        let count = values.len() / w;
        let mut g = Self {
            id,
            kind,
            values,
            fixed: vec![false; count],
            columns: Vec::new(),
            free_count: 0,
        };
        g.rebuild_columns();
        Ok(g)
    }

    fn rebuild_columns(&mut self) {
        let mut next = 0u32;
        self.columns = self
            .fixed
            .iter()
            .map(|&f| {
                if f {
                    None
                } else {
                    next += 1;
                    Some(next - 1)
                }
            })
            .collect();
        self.free_count = next as usize;
    }

    pub fn count(&self) -> usize {
        self.fixed.len()
    }

    pub fn tangent_dim(&self) -> usize {
        self.kind.tangent_dim()
    }

    pub fn free_count(&self) -> usize {
        self.free_count
    }

    /// Jacobian block column of `entity`, or `None` when it is fixed.
    pub fn column(&self, entity: usize) -> Option<u32> {
        self.columns[entity]
    }

    pub fn is_fixed(&self, entity: usize) -> bool {
        self.fixed[entity]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn entity(&self, i: usize) -> &[f64] {
        let w = self.kind.storage_width();
        &self.values[i * w..(i + 1) * w]
    }

    pub fn pose(&self, i: usize) -> PoseSE3 {
        debug_assert_eq!(self.kind, ParamKind::Pose);
        PoseSE3::from_storage_unchecked(self.entity(i))
    }

    pub fn poses(&self) -> Vec<PoseSE3> {
        (0..self.count()).map(|i| self.pose(i)).collect()
    }

    pub fn point(&self, i: usize) -> Vec3 {
        let e = self.entity(i);
        Vec3::new(e[0], e[1], e[2])
    }

    pub fn points(&self) -> Vec<Vec3> {
        (0..self.count()).map(|i| self.point(i)).collect()
    }
}

/// Ordered collection of parameter groups. The tangent update vector is laid
/// out group by group, free entities in ascending order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    groups: Vec<ParamGroup>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_poses(&mut self, poses: &[PoseSE3]) -> Result<usize> {
        let values = poses.iter().flat_map(|p| p.to_storage()).collect();
        self.add_raw(ParamKind::Pose, values)
    }

    pub fn add_points(&mut self, points: &[Vec3]) -> Result<usize> {
        let values = points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        self.add_raw(ParamKind::POINT3, values)
    }

    /// Adds a group from raw storage. Pose quaternions are renormalized.
    pub fn add_raw(&mut self, kind: ParamKind, mut values: Vec<f64>) -> Result<usize> {
        if kind == ParamKind::Pose {
            for chunk in values.chunks_mut(POSE_STORAGE) {
                let p = PoseSE3::from_storage(chunk)?;
                chunk.copy_from_slice(&p.to_storage());
            }
        }
        let id = self.groups.len();
        self.groups.push(ParamGroup::new(id, kind, values)?);
        Ok(id)
    }

    pub fn fix(&mut self, group: usize, entity: usize) -> Result<()> {
        let g = self
            .groups
            .get_mut(group)
            .ok_or_else(|| invalid(format!("no parameter group {group}")))?;
        if entity >= g.count() {
            return Err(invalid(format!("group {group} has no entity {entity}")));
        }
        g.fixed[entity] = true;
        g.rebuild_columns();
        Ok(())
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn group(&self, id: usize) -> &ParamGroup {
        &self.groups[id]
    }

    /// Length of the tangent update vector.
    pub fn tangent_len(&self) -> usize {
        self.groups
            .iter()
            .map(|g| g.free_count() * g.tangent_dim())
            .sum()
    }

    /// Offset of each group's segment in the update vector.
    pub fn tangent_offsets(&self) -> Vec<usize> {
        let mut off = vec![0];
        for g in &self.groups {
            off.push(off.last().unwrap() + g.free_count() * g.tangent_dim());
        }
        off
    }

    /// Applies `delta`: poses by `Exp(d) * pose`, vectors by addition.
    pub fn retract(&self, delta: &[f64]) -> Result<ParamSet> {
        if delta.len() != self.tangent_len() {
            return Err(invalid(format!(
                "update has length {}, expected {}",
                delta.len(),
                self.tangent_len()
            )));
        }
        if delta.iter().any(|d| !d.is_finite()) {
            return Err(invalid("update contains non-finite entries"));
        }
        let mut out = self.clone();
        let offsets = self.tangent_offsets();
        for (g, group) in out.groups.iter_mut().enumerate() {
            let t = group.tangent_dim();
            let w = group.kind.storage_width();
            let seg = &delta[offsets[g]..offsets[g + 1]];
            for i in 0..group.count() {
                let Some(col) = group.columns[i] else { continue };
                let d = &seg[col as usize * t..(col as usize + 1) * t];
                let e = &mut group.values[i * w..(i + 1) * w];
                match group.kind {
                    ParamKind::Pose => {
                        let p = PoseSE3::from_storage_unchecked(e).retract(&Tangent6::from_slice(d));
                        e.copy_from_slice(&p.to_storage());
                    }
                    ParamKind::Euclidean(_) => {
                        for (v, dv) in e.iter_mut().zip(d) {
                            *v += dv;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}
