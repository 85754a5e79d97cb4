//! Covariance accumulation and low-rank key projections.
//!
//! Calibration accumulates C = K^T K over pre-rotation keys in f64 — no mean
//! centering, since attention scores are inner products against the raw
//! keys, not deviations from their mean. (Spectrum analyses that want PCA
//! semantics can take [`Covariance::centered`] first.)
//!
//! Two projection flavors share the eigensolver: a joint projection over the
//! stacked n*d key space, and a per-head block-diagonal one that decomposes
//! each d x d diagonal block separately. The joint projection captures at
//! least as much energy at equal rank because every block-diagonal
//! orthonormal basis is itself a candidate for the joint problem, never the
//! other way around.

use serde::{Deserialize, Serialize};

use crate::eigen::jacobi_eigh;
use crate::error::{Result, SalsError};
use crate::tensor::DenseMatrix;

/// Streaming K^T K accumulator with f64 entries.
#[derive(Debug, Clone)]
pub struct Covariance {
    dim: usize,
    c: Vec<f64>,
    col_sums: Vec<f64>,
    samples_seen: usize,
}

impl Covariance {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            c: vec![0.0; dim * dim],
            col_sums: vec![0.0; dim],
            samples_seen: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn samples_seen(&self) -> usize {
        self.samples_seen
    }

    /// Row-major dim x dim matrix view.
    pub fn matrix(&self) -> &[f64] {
        &self.c
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.c[i * self.dim + i]).sum()
    }

    /// Adds K^T K for a batch of keys. Batches are additive: accumulating
    /// two halves equals accumulating their concatenation.
    pub fn accumulate(&mut self, keys: &DenseMatrix) -> Result<()> {
        if keys.cols() != self.dim {
            return Err(SalsError::ShapeMismatch {
                context: "Covariance::accumulate",
                expected: format!("{} columns", self.dim),
                got: format!("{}", keys.cols()),
            });
        }
        let nd = self.dim;
        for t in 0..keys.rows() {
            let row = keys.row(t);
            for i in 0..nd {
                let ki = row[i] as f64;
                self.col_sums[i] += ki;
                let base = i * nd;
                for (cij, &kj) in self.c[base + i..base + nd].iter_mut().zip(&row[i..]) {
                    *cij += ki * kj as f64;
                }
            }
        }
        // Mirror the upper triangle.
        for i in 0..nd {
            for j in i + 1..nd {
                self.c[j * nd + i] = self.c[i * nd + j];
            }
        }
        self.samples_seen += keys.rows();
        Ok(())
    }

    /// Merges another accumulator (parallel calibration shards).
    pub fn merge(&mut self, other: &Covariance) -> Result<()> {
        if other.dim != self.dim {
            return Err(SalsError::ShapeMismatch {
                context: "Covariance::merge",
                expected: format!("dim {}", self.dim),
                got: format!("{}", other.dim),
            });
        }
        for (a, b) in self.c.iter_mut().zip(&other.c) {
            *a += b;
        }
        for (a, b) in self.col_sums.iter_mut().zip(&other.col_sums) {
            *a += b;
        }
        self.samples_seen += other.samples_seen;
        Ok(())
    }

    /// Mean-centered variant C - s * mu mu^T, for PCA-style spectrum reports.
    pub fn centered(&self) -> Covariance {
        let nd = self.dim;
        let s = self.samples_seen as f64;
        let mut out = self.clone();
        if self.samples_seen == 0 {
            return out;
        }
        for i in 0..nd {
            let mi = self.col_sums[i] / s;
            for j in 0..nd {
                let mj = self.col_sums[j] / s;
                out.c[i * nd + j] -= s * mi * mj;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    Joint,
    PerHeadBlock,
}

/// Column-orthonormal projection U (nd x r) with its captured eigenvalues.
///
/// The authoritative basis is kept in f64 (row-major, one row per input
/// dimension): energy identities are checked against tolerances far below
/// f32 resolution, so the basis must never round-trip through f32 on the
/// analysis path. A cast-down [`DenseMatrix`] rendering is kept alongside
/// for serialization.
///
/// For the joint kind, column c is the eigenvector of the c-th largest
/// eigenvalue, so truncating to the first r* columns keeps the most
/// energetic directions — that ordering is what truncated scoring relies
/// on. For the per-head kind the columns stay grouped by head to keep the
/// block structure; `eigenvalues` is then the captured multiset, sorted
/// descending, without per-column correspondence.
#[derive(Debug, Clone)]
pub struct ProjectionMatrix {
    dim: usize,
    rank: usize,
    basis: Vec<f64>,
    u: DenseMatrix,
    eigenvalues: Vec<f64>,
    kind: ProjectionKind,
}

impl ProjectionMatrix {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// f32 rendering of the basis, for files and storage.
    pub fn matrix(&self) -> &DenseMatrix {
        &self.u
    }

    /// Row-major nd x r basis in full precision.
    pub fn basis(&self) -> &[f64] {
        &self.basis
    }

    /// Row i of the basis: the r latent weights of input dimension i.
    pub fn basis_row(&self, i: usize) -> &[f64] {
        &self.basis[i * self.rank..(i + 1) * self.rank]
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn kind(&self) -> ProjectionKind {
        self.kind
    }

    /// Max-abs entry of U^T U - I.
    pub fn orthonormality_defect(&self) -> f64 {
        let r = self.rank;
        let nd = self.dim;
        let mut worst = 0.0f64;
        for c1 in 0..r {
            for c2 in c1..r {
                let mut acc = 0.0f64;
                for i in 0..nd {
                    acc += self.basis[i * r + c1] * self.basis[i * r + c2];
                }
                let expected = if c1 == c2 { 1.0 } else { 0.0 };
                worst = worst.max((acc - expected).abs());
            }
        }
        worst
    }

    /// Wraps a full-precision basis, enforcing orthonormality and the
    /// descending-eigenvalue invariant.
    pub fn from_f64_parts(
        dim: usize,
        rank: usize,
        basis: Vec<f64>,
        eigenvalues: Vec<f64>,
        kind: ProjectionKind,
    ) -> Result<Self> {
        if basis.len() != dim * rank || rank == 0 || rank > dim {
            return Err(SalsError::ShapeMismatch {
                context: "ProjectionMatrix::from_f64_parts",
                expected: format!("{dim} x {rank} basis with rank in 1..={dim}"),
                got: format!("{} entries", basis.len()),
            });
        }
        if eigenvalues.len() != rank {
            return Err(SalsError::ShapeMismatch {
                context: "ProjectionMatrix::from_f64_parts",
                expected: format!("{rank} eigenvalues"),
                got: format!("{}", eigenvalues.len()),
            });
        }
        if basis.iter().any(|v| !v.is_finite()) {
            return Err(SalsError::InvalidInput {
                context: "ProjectionMatrix::from_f64_parts",
                reason: "basis entries must be finite".into(),
            });
        }
        if eigenvalues.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(SalsError::InvalidInput {
                context: "ProjectionMatrix::from_f64_parts",
                reason: "eigenvalues must be finite and >= 0".into(),
            });
        }
        if eigenvalues.windows(2).any(|w| w[0] < w[1]) {
            return Err(SalsError::InvalidInput {
                context: "ProjectionMatrix::from_f64_parts",
                reason: "eigenvalues must be descending".into(),
            });
        }
        let mut u = DenseMatrix::zeros(dim, rank);
        for i in 0..dim {
            for c in 0..rank {
                u.set(i, c, basis[i * rank + c] as f32);
            }
        }
        let p = Self {
            dim,
            rank,
            basis,
            u,
            eigenvalues,
            kind,
        };
        let defect = p.orthonormality_defect();
        if defect >= 1e-5 {
            return Err(SalsError::InvalidInput {
                context: "ProjectionMatrix::from_f64_parts",
                reason: format!("columns not orthonormal (defect {defect:.3e})"),
            });
        }
        Ok(p)
    }

    /// Wraps an f32 basis (typically read back from a tensor file). The
    /// cast to f64 inherits the f32 rounding; the orthonormality gate
    /// inside [`ProjectionMatrix::from_f64_parts`] still applies.
    pub fn from_parts(
        u: DenseMatrix,
        eigenvalues: Vec<f64>,
        kind: ProjectionKind,
    ) -> Result<Self> {
        let dim = u.rows();
        let rank = u.cols();
        let basis: Vec<f64> = u.data().iter().map(|v| *v as f64).collect();
        Self::from_f64_parts(dim, rank, basis, eigenvalues, kind)
    }

    /// Identity projection at full rank; useful as the lossless baseline.
    pub fn identity(nd: usize) -> Self {
        let mut basis = vec![0.0f64; nd * nd];
        let mut u = DenseMatrix::zeros(nd, nd);
        for i in 0..nd {
            basis[i * nd + i] = 1.0;
            u.set(i, i, 1.0);
        }
        Self {
            dim: nd,
            rank: nd,
            basis,
            u,
            eigenvalues: vec![1.0; nd],
            kind: ProjectionKind::Joint,
        }
    }
}

/// Shared post-processing: sort eigenpairs descending (ties keep the lower
/// original index first), clamp negative eigenvalues to zero, and fix each
/// column's sign so its largest-magnitude component is positive (ties on
/// magnitude resolved toward the lower row index).
fn sorted_top_eigenpairs(
    vals: &[f64],
    vecs: &[f64],
    n: usize,
    take: usize,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        vals[b]
            .partial_cmp(&vals[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut out_vals = Vec::with_capacity(take);
    let mut out_vecs = Vec::with_capacity(take);
    for &k in order.iter().take(take) {
        out_vals.push(vals[k].max(0.0));
        let mut col: Vec<f64> = (0..n).map(|i| vecs[i * n + k]).collect();
        let mut pivot = 0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        if col[pivot] < 0.0 {
            for v in col.iter_mut() {
                *v = -*v;
            }
        }
        out_vecs.push(col);
    }
    (out_vals, out_vecs)
}

/// Top-r eigenvectors of the accumulated covariance as a joint projection.
pub fn compute_joint_projection(acc: &Covariance, r: usize) -> Result<ProjectionMatrix> {
    let nd = acc.dim();
    if r == 0 || r > nd {
        return Err(SalsError::InvalidConfig {
            field: "latent_rank",
            reason: format!("must be in 1..={nd}, got {r}"),
        });
    }
    let (vals, vecs) = jacobi_eigh(acc.matrix(), nd)?;
    let (top_vals, top_vecs) = sorted_top_eigenpairs(&vals, &vecs, nd, r);
    let mut basis = vec![0.0f64; nd * r];
    for (c, col) in top_vecs.iter().enumerate() {
        for i in 0..nd {
            basis[i * r + c] = col[i];
        }
    }
    ProjectionMatrix::from_f64_parts(nd, r, basis, top_vals, ProjectionKind::Joint)
}

/// Block-diagonal projection: top r/n eigenvectors of each head's d x d
/// covariance block, embedded at that head's rows.
pub fn compute_per_head_projection(
    acc: &Covariance,
    r: usize,
    num_heads: usize,
) -> Result<ProjectionMatrix> {
    let nd = acc.dim();
    if num_heads == 0 || !nd.is_multiple_of(num_heads) {
        return Err(SalsError::InvalidConfig {
            field: "num_heads",
            reason: format!("must divide dim {nd}, got {num_heads}"),
        });
    }
    let d = nd / num_heads;
    if r == 0 || !r.is_multiple_of(num_heads) || r / num_heads > d {
        return Err(SalsError::InvalidConfig {
            field: "latent_rank",
            reason: format!(
                "per-head rank needs r divisible by {num_heads} with r/n <= {d}, got {r}"
            ),
        });
    }
    let per_head = r / num_heads;
    let mut basis = vec![0.0f64; nd * r];
    let mut captured = Vec::with_capacity(r);
    for h in 0..num_heads {
        let mut block = vec![0.0f64; d * d];
        for i in 0..d {
            for j in 0..d {
                block[i * d + j] = acc.matrix()[(h * d + i) * nd + (h * d + j)];
            }
        }
        let (vals, vecs) = jacobi_eigh(&block, d)?;
        let (top_vals, top_vecs) = sorted_top_eigenpairs(&vals, &vecs, d, per_head);
        for (c, col) in top_vecs.iter().enumerate() {
            for i in 0..d {
                basis[(h * d + i) * r + (h * per_head + c)] = col[i];
            }
        }
        captured.extend(top_vals);
    }
    captured.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    ProjectionMatrix::from_f64_parts(nd, r, basis, captured, ProjectionKind::PerHeadBlock)
}

/// trace(U^T C U): total key energy the projection retains.
pub fn captured_energy(acc: &Covariance, p: &ProjectionMatrix) -> Result<f64> {
    let nd = acc.dim();
    if p.dim() != nd {
        return Err(SalsError::ShapeMismatch {
            context: "captured_energy",
            expected: format!("projection dim {nd}"),
            got: format!("{}", p.dim()),
        });
    }
    let r = p.rank();
    let mut total = 0.0f64;
    let mut cu = vec![0.0f64; nd];
    for c in 0..r {
        for (i, slot) in cu.iter_mut().enumerate() {
            let mut acc_i = 0.0f64;
            for j in 0..nd {
                acc_i += acc.matrix()[i * nd + j] * p.basis()[j * r + c];
            }
            *slot = acc_i;
        }
        for (i, &cui) in cu.iter().enumerate() {
            total += p.basis()[i * r + c] * cui;
        }
    }
    Ok(total)
}

/// Residual energy identity partner: squared Frobenius norm of K - K U U^T.
pub fn reconstruction_residual(keys: &DenseMatrix, p: &ProjectionMatrix) -> Result<f64> {
    let nd = keys.cols();
    if p.dim() != nd {
        return Err(SalsError::ShapeMismatch {
            context: "reconstruction_residual",
            expected: format!("projection dim {nd}"),
            got: format!("{}", p.dim()),
        });
    }
    let r = p.rank();
    let mut total = 0.0f64;
    let mut latent = vec![0.0f64; r];
    for t in 0..keys.rows() {
        let row = keys.row(t);
        for (c, l) in latent.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for (i, &ri) in row.iter().enumerate() {
                acc += ri as f64 * p.basis()[i * r + c];
            }
            *l = acc;
        }
        for (i, &ri) in row.iter().enumerate() {
            let resid = ri as f64 - dot64_slices(latent.as_slice(), p.basis_row(i));
            total += resid * resid;
        }
    }
    Ok(total)
}

fn dot64_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
