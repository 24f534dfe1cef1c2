//! Global guidance: cluster text embeddings, solve each group's
//! reconstruction weights in closed form, and penalize image features that
//! break the text space's affine structure.

use std::path::Path;

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{CmgError, Result};
use crate::numerics::{kmeans, ridge_solve, Matrix};

const WEIGHTS_MAGIC: &[u8; 4] = b"CMGW";
const WEIGHTS_VERSION: u32 = 1;

/// Partition of the training samples into text clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub k: usize,
    pub group_of: Vec<usize>,
    pub members: Vec<Vec<usize>>,
}

/// Seeded k-means over text embeddings; groups partition the sample set.
pub fn cluster_texts(z_t: &Matrix, k: usize, seed: u64) -> Result<ClusterAssignment> {
    let result = kmeans(z_t, k, seed, 200)?;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &g) in result.assignments.iter().enumerate() {
        members[g].push(i);
    }
    Ok(ClusterAssignment { k, group_of: result.assignments, members })
}

/// Reconstruction weights of one group member: the Gram matrix of
/// difference vectors against the other members, ridge-stabilized and
/// normalized so the row sums to one.
fn member_weights(group: &Matrix, i: usize, ridge_eps: f64) -> Result<Vec<f64>> {
    let n = group.rows();
    let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
    if others.len() == 1 {
        // The sum constraint forces the single weight.
        return Ok(vec![1.0]);
    }
    let d = group.cols();
    let mut diffs = Matrix::zeros(others.len(), d);
    for (r, &j) in others.iter().enumerate() {
        for c in 0..d {
            diffs.set(r, c, group.get(j, c) - group.get(i, c));
        }
    }
    let m = others.len();
    let mut gram = Matrix::zeros(m, m);
    let mut trace = 0.0;
    for a in 0..m {
        for b in a..m {
            let v = crate::numerics::dot(diffs.row(a), diffs.row(b));
            gram.set(a, b, v);
            gram.set(b, a, v);
            if a == b {
                trace += v;
            }
        }
    }
    if trace <= f64::EPSILON {
        // Every neighbour coincides with y_i; any convex row works, so take
        // the uniform one.
        return Ok(vec![1.0 / m as f64; m]);
    }
    let eps = ridge_eps * trace / m as f64;
    let ones = vec![1.0; m];
    let x = ridge_solve(&gram, &ones, eps)?;
    let total: f64 = x.iter().sum();
    if !total.is_finite() || total == 0.0 {
        return Err(CmgError::Numerical("weight normalization failed".into()));
    }
    Ok(x.iter().map(|v| v / total).collect())
}

/// Full N x N weight matrix for one group: zero diagonal, each row summing
/// to one. Errors on singleton groups.
pub fn lle_weights(group: &Matrix, ridge_eps: f64) -> Result<Matrix> {
    let n = group.rows();
    if n < 2 {
        return Err(CmgError::Domain("degenerate group: need at least 2 members".into()));
    }
    let mut w = Matrix::zeros(n, n);
    for i in 0..n {
        let row_weights = member_weights(group, i, ridge_eps)?;
        let mut c = 0;
        for j in 0..n {
            if j == i {
                continue;
            }
            w.set(i, j, row_weights[c]);
            c += 1;
        }
    }
    Ok(w)
}

/// Per-group reconstruction weights, indexed back into the full training
/// set. Singleton clusters are skipped: their weights are undefined and
/// they contribute no loss.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupWeights {
    pub groups: Vec<GroupBlock>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupBlock {
    pub members: Vec<usize>,
    pub w: Matrix,
}

pub fn build_group_weights(
    z_t: &Matrix,
    assignment: &ClusterAssignment,
    ridge_eps: f64,
) -> Result<GroupWeights> {
    let mut groups = Vec::new();
    for members in &assignment.members {
        if members.len() < 2 {
            continue;
        }
        let rows: Vec<Vec<f64>> = members.iter().map(|&i| z_t.row(i).to_vec()).collect();
        let group = Matrix::from_rows(&rows)?;
        let w = lle_weights(&group, ridge_eps)?;
        groups.push(GroupBlock { members: members.clone(), w });
    }
    Ok(GroupWeights { groups })
}

impl GroupWeights {
    pub fn check_invariants(&self) -> Result<()> {
        for block in &self.groups {
            let n = block.members.len();
            if block.w.rows() != n || block.w.cols() != n {
                return Err(CmgError::Shape("weight block size mismatch".into()));
            }
            for i in 0..n {
                if block.w.get(i, i) != 0.0 {
                    return Err(CmgError::Data("weight diagonal must be exactly zero".into()));
                }
                let sum: f64 = block.w.row(i).iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(CmgError::Data(format!("weight row sums to {sum}, not 1")));
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.magic(WEIGHTS_MAGIC).u32(WEIGHTS_VERSION).u32(self.groups.len() as u32);
        for block in &self.groups {
            w.u32(block.members.len() as u32);
            for &m in &block.members {
                w.u32(m as u32);
            }
            w.f64_slice(block.w.data());
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(WEIGHTS_MAGIC)?;
        r.expect_version(WEIGHTS_VERSION)?;
        let n_groups = r.read_u32()? as usize;
        let mut groups = Vec::with_capacity(n_groups);
        for _ in 0..n_groups {
            let n = r.read_u32()? as usize;
            let mut members = Vec::with_capacity(n);
            for _ in 0..n {
                members.push(r.read_u32()? as usize);
            }
            let data = r.read_f64_vec(n * n)?;
            let w = Matrix::from_vec(n, n, data).map_err(|e| CmgError::Parse {
                offset: r.offset(),
                message: format!("bad weight block: {e}"),
            })?;
            groups.push(GroupBlock { members, w });
        }
        r.finish()?;
        let gw = GroupWeights { groups };
        gw.check_invariants()?;
        Ok(gw)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Structure-matching penalty for one group: the summed squared residual of
/// reconstructing each feature row from its weighted group-mates, plus the
/// exact gradient with respect to the features.
pub fn global_loss(features: &Matrix, w: &Matrix) -> Result<(f64, Matrix)> {
    let n = features.rows();
    if w.rows() != n || w.cols() != n {
        return Err(CmgError::Shape(format!(
            "weights are {}x{} but features have {} rows",
            w.rows(),
            w.cols(),
            n
        )));
    }
    let d = features.cols();
    let mut residuals = Matrix::zeros(n, d);
    let mut loss = 0.0;
    for i in 0..n {
        for c in 0..d {
            let mut r = features.get(i, c);
            for j in 0..n {
                let wij = w.get(i, j);
                if wij != 0.0 {
                    r -= wij * features.get(j, c);
                }
            }
            residuals.set(i, c, r);
            loss += r * r;
        }
    }
    // dL/df_p = 2 r_p - 2 sum_i w_ip r_i
    let mut grad = Matrix::zeros(n, d);
    for p in 0..n {
        for c in 0..d {
            let mut g = 2.0 * residuals.get(p, c);
            for i in 0..n {
                let wip = w.get(i, p);
                if wip != 0.0 {
                    g -= 2.0 * wip * residuals.get(i, c);
                }
            }
            grad.set(p, c, g);
        }
    }
    Ok((loss, grad))
}
