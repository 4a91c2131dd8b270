//! Spectral tools: a cyclic Jacobi eigensolver for symmetric matrices, an SVD
//! built on it, Kronecker products, and column-stacking vectorization.
//!
//! Jacobi is chosen over QR deliberately: at desk scale (n <= 200) it is easy
//! to verify, and its eigenvector matrix is orthogonal to machine precision,
//! which the subspace-mass bookkeeping downstream depends on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, norm, DenseMatrix};
use crate::rng::Rng;

const MAX_SWEEPS: usize = 100;
const OFF_DIAGONAL_REL_TOL: f64 = 1e-12;
const SYMMETRY_REL_TOL: f64 = 1e-10;

/// Floor below which recovered left singular vectors are unreliable; such
/// columns are replaced by a deterministic orthonormal completion. Singular
/// values under this floor carry reduced relative accuracy.
const SINGULAR_RECOVERY_FLOOR: f64 = 1e-7;

/// Residual threshold under which a Gram-Schmidt candidate is considered
/// linearly dependent and skipped.
const GS_SKIP_TOL: f64 = 1e-8;

/// Eigendecomposition of a symmetric matrix. Eigenvalues are sorted by
/// descending magnitude; magnitude ties break descending by signed value,
/// then by original position. Column i of `eigenvectors` pairs with
/// `eigenvalues[i]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DenseMatrix,
}

impl SpectralDecomposition {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvector(&self, i: usize) -> Vec<f64> {
        self.eigenvectors.column(i)
    }
}

/// Thin SVD: `u` is m x r, `v` is n x r with r = min(m, n), and
/// `singular_values` is non-negative, sorted descending.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvdResult {
    pub u: DenseMatrix,
    pub singular_values: Vec<f64>,
    pub v: DenseMatrix,
}

/// Cyclic Jacobi eigensolver. Sweeps rotate every (p, q) pair until the
/// off-diagonal Frobenius mass drops to 1e-12 of the input norm, capped at
/// 100 sweeps. Errors on non-square or asymmetric input.
pub fn sym_eig(a: &DenseMatrix) -> Result<SpectralDecomposition> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "sym_eig needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let n = a.rows();
    let fro = a.frobenius_norm();
    if n > 0 {
        let asymmetry = a.asymmetry();
        let tolerance = SYMMETRY_REL_TOL * (1.0 + fro);
        if asymmetry > tolerance {
            return Err(Error::NotSymmetric { asymmetry, tolerance });
        }
    }

    let mut m = a.clone();
    let mut v = DenseMatrix::identity(n);
    let target = OFF_DIAGONAL_REL_TOL * fro;

    let mut converged = false;
    let mut last_off = 0.0;
    for _sweep in 0..MAX_SWEEPS {
        let off = off_diagonal_mass(&m);
        last_off = off;
        if off <= target {
            converged = true;
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                rotate(&mut m, &mut v, p, q);
            }
        }
    }
    if !converged {
        // One final check: the last sweep may have finished the job.
        if off_diagonal_mass(&m) <= target {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::NoConvergence { sweeps: MAX_SWEEPS, off: last_off });
    }

    let raw: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
    let order = eigen_order(&raw);
    let eigenvalues: Vec<f64> = order.iter().map(|&i| raw[i]).collect();
    let mut eigenvectors = DenseMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.set_column(dst, &v.column(src));
    }
    Ok(SpectralDecomposition { eigenvalues, eigenvectors })
}

fn off_diagonal_mass(m: &DenseMatrix) -> f64 {
    let n = m.rows();
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            sum += 2.0 * m[(i, j)] * m[(i, j)];
        }
    }
    sum.sqrt()
}

/// One Jacobi rotation zeroing m[(p, q)]; accumulates the rotation into v.
fn rotate(m: &mut DenseMatrix, v: &mut DenseMatrix, p: usize, q: usize) {
    let apq = m[(p, q)];
    if apq == 0.0 {
        return;
    }
    let app = m[(p, p)];
    let aqq = m[(q, q)];
    let tau = (aqq - app) / (2.0 * apq);
    let t = tau.signum() / (tau.abs() + f64::hypot(1.0, tau));
    let c = 1.0 / f64::hypot(1.0, t);
    let s = t * c;

    let n = m.rows();
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = m[(k, p)];
        let akq = m[(k, q)];
        let new_p = c * akp - s * akq;
        let new_q = s * akp + c * akq;
        m[(k, p)] = new_p;
        m[(p, k)] = new_p;
        m[(k, q)] = new_q;
        m[(q, k)] = new_q;
    }
    m[(p, p)] = c * c * app - 2.0 * s * c * apq + s * s * aqq;
    m[(q, q)] = s * s * app + 2.0 * s * c * apq + c * c * aqq;
    m[(p, q)] = 0.0;
    m[(q, p)] = 0.0;

    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// Sort order: |lambda| descending, ties by signed value descending, then by
/// original index (so repeated eigenvalues keep a stable vector order).
fn eigen_order(raw: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&i, &j| {
        raw[j]
            .abs()
            .total_cmp(&raw[i].abs())
            .then(raw[j].total_cmp(&raw[i]))
            .then(i.cmp(&j))
    });
    order
}

/// SVD computed from the eigendecomposition of WᵀW; left vectors are
/// recovered as Wv_i/σ_i. Columns whose σ_i falls under 1e-7·σ_1 are
/// replaced by a Gram-Schmidt completion over canonical vectors, so U stays
/// orthonormal; those σ carry reduced relative accuracy.
pub fn svd(w: &DenseMatrix) -> Result<SvdResult> {
    let (m, n) = (w.rows(), w.cols());
    let r = m.min(n);
    let gram = w.transpose().matmul(w);
    let spec = sym_eig(&gram)?;

    let singular_values: Vec<f64> = (0..r).map(|i| spec.eigenvalues[i].max(0.0).sqrt()).collect();
    let mut v = DenseMatrix::zeros(n, r);
    for i in 0..r {
        v.set_column(i, &spec.eigenvector(i));
    }

    let sigma_1 = singular_values.first().copied().unwrap_or(0.0);
    let floor = SINGULAR_RECOVERY_FLOOR * sigma_1;
    let mut columns: Vec<Option<Vec<f64>>> = vec![None; r];
    let mut filled: Vec<Vec<f64>> = Vec::with_capacity(r);
    for i in 0..r {
        if singular_values[i] <= floor || singular_values[i] == 0.0 {
            continue;
        }
        let vi = DenseMatrix::column_vector(&v.column(i));
        let mut col = w.matmul(&vi).column(0);
        for x in &mut col {
            *x /= singular_values[i];
        }
        // Two orthogonalization passes against already-recovered columns;
        // a no-op for well-separated spectra.
        for _ in 0..2 {
            for prev in &filled {
                let d = dot(prev, &col);
                for (c, p) in col.iter_mut().zip(prev) {
                    *c -= d * p;
                }
            }
        }
        let nrm = norm(&col);
        if nrm > 0.5 {
            for x in &mut col {
                *x /= nrm;
            }
            filled.push(col.clone());
            columns[i] = Some(col);
        }
    }
    for slot in columns.iter_mut() {
        if slot.is_none() {
            let fill = complete_orthonormal_basis(&filled, m, 1).pop().expect("dim exceeded");
            filled.push(fill.clone());
            *slot = Some(fill);
        }
    }
    let mut u = DenseMatrix::zeros(m, r);
    for (i, col) in columns.iter().enumerate() {
        u.set_column(i, col.as_ref().expect("every column filled"));
    }
    Ok(SvdResult { u, singular_values, v })
}

/// Count of singular values exceeding tol·σ_1; zero matrix has rank 0.
/// Scale-invariant by construction.
pub fn numerical_rank(x: &DenseMatrix, tol: f64) -> Result<usize> {
    assert!(tol > 0.0, "rank tolerance must be positive");
    let s = svd(x)?;
    let sigma_1 = s.singular_values.first().copied().unwrap_or(0.0);
    if sigma_1 == 0.0 {
        return Ok(0);
    }
    Ok(s.singular_values.iter().filter(|&&sv| sv > tol * sigma_1).count())
}

pub fn kron(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let (ra, ca) = (a.rows(), a.cols());
    let (rb, cb) = (b.rows(), b.cols());
    let mut out = DenseMatrix::zeros(ra * rb, ca * cb);
    for i in 0..ra {
        for j in 0..ca {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            for k in 0..rb {
                for l in 0..cb {
                    out[(i * rb + k, j * cb + l)] = aij * b[(k, l)];
                }
            }
        }
    }
    out
}

/// Column-stacking vectorization: vec(X)[j·rows + i] = X[i, j].
pub fn vectorize(x: &DenseMatrix) -> DenseMatrix {
    let (rows, cols) = (x.rows(), x.cols());
    let mut out = DenseMatrix::zeros(rows * cols, 1);
    for j in 0..cols {
        for i in 0..rows {
            out[(j * rows + i, 0)] = x[(i, j)];
        }
    }
    out
}

/// Inverse of `vectorize`; errors if the length does not factor.
pub fn unvectorize(v: &DenseMatrix, rows: usize, cols: usize) -> Result<DenseMatrix> {
    if v.cols() != 1 || v.rows() != rows * cols {
        return Err(Error::DimensionMismatch(format!(
            "cannot reshape {}x{} vector into {rows}x{cols}",
            v.rows(),
            v.cols()
        )));
    }
    let mut out = DenseMatrix::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            out[(i, j)] = v[(j * rows + i, 0)];
        }
    }
    Ok(out)
}

/// Extends an orthonormal set by `count` vectors via Gram-Schmidt over the
/// canonical basis in index order, skipping candidates whose residual norm
/// is at most 1e-8. Deterministic; panics if the space is exhausted.
pub fn complete_orthonormal_basis(
    basis: &[Vec<f64>],
    dim: usize,
    count: usize,
) -> Vec<Vec<f64>> {
    assert!(basis.len() + count <= dim, "completion exceeds dimension {dim}");
    let mut all: Vec<Vec<f64>> = basis.to_vec();
    let mut added = Vec::with_capacity(count);
    let mut next_canonical = 0usize;
    while added.len() < count {
        assert!(next_canonical < dim, "ran out of canonical candidates in dimension {dim}");
        let mut cand = vec![0.0; dim];
        cand[next_canonical] = 1.0;
        next_canonical += 1;
        for _ in 0..2 {
            for b in &all {
                let d = dot(b, &cand);
                for (c, x) in cand.iter_mut().zip(b) {
                    *c -= d * x;
                }
            }
        }
        let nrm = norm(&cand);
        if nrm <= GS_SKIP_TOL {
            continue;
        }
        for x in &mut cand {
            *x /= nrm;
        }
        all.push(cand.clone());
        added.push(cand);
    }
    added
}

/// Random orthogonal matrix: Gram-Schmidt applied to a standard normal
/// matrix, redrawing any column that collapses.
pub fn random_orthogonal(n: usize, rng: &mut Rng) -> DenseMatrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut cand: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        for _ in 0..2 {
            for b in &cols {
                let d = dot(b, &cand);
                for (c, x) in cand.iter_mut().zip(b) {
                    *c -= d * x;
                }
            }
        }
        let nrm = norm(&cand);
        if nrm <= GS_SKIP_TOL {
            continue;
        }
        for x in &mut cand {
            *x /= nrm;
        }
        cols.push(cand);
    }
    let mut q = DenseMatrix::zeros(n, n);
    for (j, col) in cols.iter().enumerate() {
        q.set_column(j, col);
    }
    q
}

/// Assembles Q·diag(lambda)·Qᵀ, symmetrized bitwise.
pub fn from_spectrum(q: &DenseMatrix, lambda: &[f64]) -> DenseMatrix {
    assert!(q.is_square(), "basis must be square");
    let n = q.rows();
    assert_eq!(lambda.len(), n, "spectrum length must match dimension");
    let mut out = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut sum = 0.0;
            for (k, &lk) in lambda.iter().enumerate() {
                sum += lk * q[(i, k)] * q[(j, k)];
            }
            out[(i, j)] = sum;
            out[(j, i)] = sum;
        }
    }
    out
}
