//! Dense linear algebra kernels for small matrices.
//!
//! Everything here targets the desk scale of this crate (dimensions in the
//! tens, not thousands): one-sided Jacobi SVD, symmetric Jacobi
//! eigendecomposition, Cholesky, seeded orthogonal matrices and plane
//! rotations. All routines are pure and reentrant.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::standard_normal;
use crate::tol;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("invalid matrix shape {rows}x{cols}")]
    InvalidShape { rows: usize, cols: usize },
    #[error("matrix data length {got} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, got: usize },
    #[error("non-finite entry at ({row},{col})")]
    NonFinite { row: usize, col: usize },
    #[error("SVD did not converge within {0} sweeps")]
    SvdNonConvergence(usize),
    #[error("matrix is rank deficient (sigma_min/sigma_max = {ratio:.3e})")]
    RankDeficient { ratio: f64 },
    #[error("matrix is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("matrix is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Dense real matrix, row-major storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be positive");
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(dim: usize) -> Matrix {
        let mut m = Matrix::zeros(dim, dim);
        for i in 0..dim {
            m.data[i * dim + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if rows == 0 || cols == 0 {
            return Err(LinalgError::InvalidShape { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(LinalgError::DataLength { rows, cols, got: data.len() });
        }
        for (i, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(LinalgError::NonFinite { row: i / cols, col: i % cols });
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds from nested rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(LinalgError::InvalidShape { rows: rows.len(), cols: 0 });
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(LinalgError::DimensionMismatch(format!(
                    "ragged rows: expected {cols}, got {}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn diag(entries: &[f64]) -> Matrix {
        let mut m = Matrix::zeros(entries.len(), entries.len());
        for (i, v) in entries.iter().enumerate() {
            m.data[i * entries.len() + i] = *v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn set_column(&mut self, c: usize, v: &[f64]) {
        assert_eq!(v.len(), self.rows);
        for (r, x) in v.iter().enumerate() {
            self.set(r, c, *x);
        }
    }

    /// Keeps only the listed columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, cols.len(), |i, j| self.get(i, cols[j]))
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    /// `self * other`, i-k-j loop order so the inner loop runs over
    /// contiguous rows of both operands.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        matmul_into(self, other, &mut out);
        out
    }

    /// `self * other^T`; inner loop is a dot product of two contiguous rows.
    pub fn matmul_bt(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_bt shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                let b = other.row(j);
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += a[k] * b[k];
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        out
    }

    /// `self^T * other`.
    pub fn matmul_at(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "matmul_at shape mismatch");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a = self.row(k);
            let b = other.row(k);
            for i in 0..self.cols {
                let ai = a[i];
                if ai == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for j in 0..other.cols {
                    orow[j] += ai * b[j];
                }
            }
        }
        out
    }

    /// Gram matrix `self^T * self`.
    pub fn gram(&self) -> Matrix {
        self.matmul_at(self)
    }

    /// `self * v` for a vector.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        (0..self.rows)
            .map(|i| {
                let row = self.row(i);
                row.iter().zip(v).map(|(a, b)| a * b).sum()
            })
            .collect()
    }
}

/// `out = a * b` with `out` preallocated; used by the batched net passes.
pub fn matmul_into(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    assert_eq!(a.cols, b.rows, "matmul shape mismatch");
    assert_eq!((out.rows, out.cols), (a.rows, b.cols), "output shape mismatch");
    out.data.fill(0.0);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = arow[k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for j in 0..b.cols {
                orow[j] += aik * brow[j];
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// SVD factors `m = u * diag(sigma) * v_k^T` where `v_k` is the first
/// `sigma.len()` columns of `v`. For the common tall case (`rows >= cols`)
/// `u` is thin `n x d` and `v` is the full `d x d` right factor.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdFactors {
    /// Reconstructs the original matrix from the factors.
    pub fn reconstruct(&self) -> Matrix {
        let k = self.sigma.len();
        let mut scaled = self.u.clone();
        for j in 0..k {
            for i in 0..scaled.rows() {
                let v = scaled.get(i, j) * self.sigma[j];
                scaled.set(i, j, v);
            }
        }
        let vk = if self.v.cols() == k { self.v.clone() } else { self.v.select_columns(&(0..k).collect::<Vec<_>>()) };
        scaled.matmul_bt(&vk)
    }
}

/// One-sided Jacobi SVD.
///
/// Rotates column pairs of a working copy until all pairs are orthogonal to
/// relative tolerance, then reads off singular values as column norms. Wide
/// inputs are handled through the transposed problem; zero singular values
/// get their left vectors from a Gram-Schmidt basis completion so `u` stays
/// orthonormal.
pub fn svd(m: &Matrix) -> Result<SvdFactors> {
    if !m.is_finite() {
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                if !m.get(i, j).is_finite() {
                    return Err(LinalgError::NonFinite { row: i, col: j });
                }
            }
        }
    }
    if m.rows() >= m.cols() {
        svd_tall(m)
    } else {
        // m = (m^T)^T = (U' S V'^T)^T = V' S U'^T
        let f = svd_tall(&m.transpose())?;
        let k = f.sigma.len();
        let u = f.v.select_columns(&(0..k).collect::<Vec<_>>());
        let v = complete_orthonormal_columns(&f.u, m.cols());
        Ok(SvdFactors { u, sigma: f.sigma, v })
    }
}

fn svd_tall(m: &Matrix) -> Result<SvdFactors> {
    let n = m.rows();
    let d = m.cols();
    let mut a = m.clone();
    let mut v = Matrix::identity(d);

    let mut converged = false;
    for _ in 0..tol::SVD_MAX_SWEEPS {
        let mut off = 0.0_f64;
        for p in 0..d {
            for q in (p + 1)..d {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..n {
                    let ap = a.get(i, p);
                    let aq = a.get(i, q);
                    alpha += ap * ap;
                    beta += aq * aq;
                    gamma += ap * aq;
                }
                let scale = (alpha * beta).sqrt();
                if scale == 0.0 {
                    continue;
                }
                let rel = gamma.abs() / scale;
                off = off.max(rel);
                if rel <= tol::SVD_JACOBI_OFF_DIAG {
                    continue;
                }
                // Jacobi rotation zeroing the (p,q) Gram entry.
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..n {
                    let ap = a.get(i, p);
                    let aq = a.get(i, q);
                    a.set(i, p, c * ap - s * aq);
                    a.set(i, q, s * ap + c * aq);
                }
                for i in 0..d {
                    let vp = v.get(i, p);
                    let vq = v.get(i, q);
                    v.set(i, p, c * vp - s * vq);
                    v.set(i, q, s * vp + c * vq);
                }
            }
        }
        if off <= tol::SVD_JACOBI_OFF_DIAG {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(LinalgError::SvdNonConvergence(tol::SVD_MAX_SWEEPS));
    }

    let mut sigma: Vec<f64> = (0..d).map(|j| norm(&a.column(j))).collect();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).unwrap());

    let mut u = Matrix::zeros(n, d);
    let mut v_sorted = Matrix::zeros(d, d);
    let mut sigma_sorted = Vec::with_capacity(d);
    let sigma_max = order.first().map(|&j| sigma[j]).unwrap_or(0.0);
    for (new_j, &old_j) in order.iter().enumerate() {
        sigma_sorted.push(sigma[old_j]);
        for i in 0..d {
            v_sorted.set(i, new_j, v.get(i, old_j));
        }
        if sigma[old_j] > sigma_max * f64::EPSILON && sigma[old_j] > 0.0 {
            for i in 0..n {
                u.set(i, new_j, a.get(i, old_j) / sigma[old_j]);
            }
        }
        // zero columns are filled below by basis completion
    }
    sigma = sigma_sorted;
    fill_zero_columns(&mut u, &sigma, sigma_max);
    Ok(SvdFactors { u, sigma, v: v_sorted })
}

/// Replaces the left-vector columns of (numerically) zero singular values by
/// unit vectors orthogonal to the existing columns.
fn fill_zero_columns(u: &mut Matrix, sigma: &[f64], sigma_max: f64) {
    let n = u.rows();
    for j in 0..sigma.len() {
        if sigma[j] > sigma_max * f64::EPSILON && sigma[j] > 0.0 {
            continue;
        }
        'candidates: for e in 0..n {
            let mut cand = vec![0.0; n];
            cand[e] = 1.0;
            for k in 0..sigma.len() {
                if k == j {
                    continue;
                }
                let col = u.column(k);
                let proj = dot(&cand, &col);
                for i in 0..n {
                    cand[i] -= proj * col[i];
                }
            }
            let nrm = norm(&cand);
            if nrm > 0.5 {
                for i in 0..n {
                    u.set(i, j, cand[i] / nrm);
                }
                break 'candidates;
            }
        }
    }
}

/// Extends a matrix with orthonormal columns to a full square orthogonal
/// matrix of size `dim`.
fn complete_orthonormal_columns(partial: &Matrix, dim: usize) -> Matrix {
    assert_eq!(partial.rows(), dim);
    let k = partial.cols();
    let mut out = Matrix::zeros(dim, dim);
    for j in 0..k {
        out.set_column(j, &partial.column(j));
    }
    let mut next = k;
    for e in 0..dim {
        if next == dim {
            break;
        }
        let mut cand = vec![0.0; dim];
        cand[e] = 1.0;
        for j in 0..next {
            let col = out.column(j);
            let proj = dot(&cand, &col);
            for i in 0..dim {
                cand[i] -= proj * col[i];
            }
        }
        let nrm = norm(&cand);
        if nrm > 0.5 {
            for i in 0..dim {
                out.set(i, next, cand[i] / nrm);
            }
            next += 1;
        }
    }
    assert_eq!(next, dim, "basis completion failed");
    out
}

/// Product of singular values.
///
/// Rank deficiency (smallest/largest singular value below the shared
/// threshold) is an error: a degenerate decoder is the caller's call to
/// handle, never silently folded into a zero product.
pub fn psdet(m: &Matrix) -> Result<f64> {
    let f = svd(m)?;
    let largest = f.sigma[0];
    let smallest = *f.sigma.last().unwrap();
    if largest <= 0.0 || smallest <= tol::RANK_REL * largest {
        return Err(LinalgError::RankDeficient { ratio: if largest > 0.0 { smallest / largest } else { 0.0 } });
    }
    Ok(f.sigma.iter().product())
}

/// Lower-triangular Cholesky factor with positive diagonal.
pub fn cholesky_factor(spd: &Matrix) -> Result<Matrix> {
    let n = spd.rows();
    if spd.cols() != n {
        return Err(LinalgError::InvalidShape { rows: spd.rows(), cols: spd.cols() });
    }
    let scale = spd.max_abs().max(1e-300);
    let mut asym = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((spd.get(i, j) - spd.get(j, i)).abs());
        }
    }
    if asym > 1e-8 * scale {
        return Err(LinalgError::NotSymmetric(asym / scale));
    }
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = spd.get(i, j);
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(LinalgError::NotPositiveDefinite);
                }
                l.set(i, j, sum.sqrt());
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Symmetric eigendecomposition by cyclic Jacobi.
///
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// the columns of the returned matrix.
pub fn eigh_symmetric(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = m.rows();
    if m.cols() != n {
        return Err(LinalgError::InvalidShape { rows: m.rows(), cols: m.cols() });
    }
    let mut a = m.clone();
    let mut q = Matrix::identity(n);
    for _ in 0..tol::SVD_MAX_SWEEPS {
        let mut off = 0.0_f64;
        for p in 0..n {
            for q_idx in (p + 1)..n {
                let apq = a.get(p, q_idx);
                let scale = (a.get(p, p).abs() + a.get(q_idx, q_idx).abs()).max(1e-300);
                if apq.abs() <= tol::SVD_JACOBI_OFF_DIAG * scale {
                    continue;
                }
                off = off.max(apq.abs() / scale);
                let app = a.get(p, p);
                let aqq = a.get(q_idx, q_idx);
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..n {
                    let aip = a.get(i, p);
                    let aiq = a.get(i, q_idx);
                    a.set(i, p, c * aip - s * aiq);
                    a.set(i, q_idx, s * aip + c * aiq);
                }
                for j in 0..n {
                    let apj = a.get(p, j);
                    let aqj = a.get(q_idx, j);
                    a.set(p, j, c * apj - s * aqj);
                    a.set(q_idx, j, s * apj + c * aqj);
                }
                for i in 0..n {
                    let qip = q.get(i, p);
                    let qiq = q.get(i, q_idx);
                    q.set(i, p, c * qip - s * qiq);
                    q.set(i, q_idx, s * qip + c * qiq);
                }
            }
        }
        if off == 0.0 {
            break;
        }
    }
    let mut vals: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| vals[j].partial_cmp(&vals[i]).unwrap());
    let vecs = q.select_columns(&order);
    vals = order.iter().map(|&i| vals[i]).collect();
    Ok((vals, vecs))
}

/// Determinant by partial-pivot LU; small matrices only.
pub fn determinant(m: &Matrix) -> Result<f64> {
    let n = m.rows();
    if m.cols() != n {
        return Err(LinalgError::InvalidShape { rows: m.rows(), cols: m.cols() });
    }
    let mut a = m.clone();
    let mut det = 1.0;
    for col in 0..n {
        let mut pivot = col;
        for r in (col + 1)..n {
            if a.get(r, col).abs() > a.get(pivot, col).abs() {
                pivot = r;
            }
        }
        if a.get(pivot, col) == 0.0 {
            return Ok(0.0);
        }
        if pivot != col {
            for j in 0..n {
                let tmp = a.get(col, j);
                a.set(col, j, a.get(pivot, j));
                a.set(pivot, j, tmp);
            }
            det = -det;
        }
        let p = a.get(col, col);
        det *= p;
        for r in (col + 1)..n {
            let factor = a.get(r, col) / p;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                let v = a.get(r, j) - factor * a.get(col, j);
                a.set(r, j, v);
            }
        }
    }
    Ok(det)
}

/// Haar-like random orthogonal matrix: QR of a Gaussian matrix with the sign
/// of each R diagonal entry folded into the corresponding Q column.
pub fn random_orthogonal(dim: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_orthogonal_with(dim, &mut rng)
}

pub fn random_orthogonal_with(dim: usize, rng: &mut impl Rng) -> Matrix {
    assert!(dim >= 1);
    loop {
        let g = Matrix::from_fn(dim, dim, |_, _| standard_normal(rng));
        if let Some(q) = gram_schmidt_q(&g) {
            return q;
        }
        // near-singular Gaussian draw; redraw
    }
}

/// Modified Gram-Schmidt Q factor with sign-fixed diagonal; `None` when a
/// column degenerates.
fn gram_schmidt_q(m: &Matrix) -> Option<Matrix> {
    let n = m.rows();
    let mut q = Matrix::zeros(n, n);
    for j in 0..n {
        let mut v = m.column(j);
        for k in 0..j {
            let col = q.column(k);
            let proj = dot(&v, &col);
            for i in 0..n {
                v[i] -= proj * col[i];
            }
        }
        // second orthogonalization pass for numerical hygiene
        for k in 0..j {
            let col = q.column(k);
            let proj = dot(&v, &col);
            for i in 0..n {
                v[i] -= proj * col[i];
            }
        }
        let nrm = norm(&v);
        if nrm < 1e-10 {
            return None;
        }
        // sign-fix: R_jj = v . original_j after projection is `nrm` > 0 with
        // direction v; fold the sign of the original diagonal component in.
        let r_jj = dot(&v, &m.column(j)) / nrm;
        let s = if r_jj < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            q.set(i, j, s * v[i] / nrm);
        }
    }
    Some(q)
}

/// Standard 2D rotation matrix by `theta` radians.
pub fn rotation_2d(theta: f64) -> Matrix {
    let (s, c) = theta.sin_cos();
    Matrix::from_vec(2, 2, vec![c, -s, s, c]).unwrap()
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn solve_lower_triangular(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    assert_eq!(l.cols(), n);
    assert_eq!(b.len(), n);
    let mut x = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for j in 0..i {
            sum -= l.get(i, j) * x[j];
        }
        x[i] = sum / l.get(i, i);
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
        assert!((a - b).abs() <= tol, "{what}: {a} vs {b} (tol {tol})");
    }

    fn m1() -> Matrix {
        Matrix::from_rows(&[vec![4.0, 1.0], vec![-3.0, 1.0], vec![5.0, -1.0]]).unwrap()
    }

    fn check_factors(m: &Matrix, f: &SvdFactors) {
        // orthonormal columns
        let gu = f.u.gram();
        let gv = f.v.gram();
        for (g, dim) in [(&gu, f.u.cols()), (&gv, f.v.cols())] {
            let diff = g.sub(&Matrix::identity(dim));
            assert!(diff.max_abs() <= tol::SVD_ORTHONORMALITY, "gram off by {}", diff.max_abs());
        }
        // reconstruction
        let rec = f.reconstruct();
        let denom = m.frobenius_norm().max(1e-300);
        assert!(
            rec.sub(m).frobenius_norm() / denom <= tol::SVD_RECONSTRUCTION_REL,
            "reconstruction error {}",
            rec.sub(m).frobenius_norm() / denom
        );
        // descending
        for w in f.sigma.windows(2) {
            assert!(w[0] >= w[1] - 1e-15);
        }
    }

    #[test]
    fn svd_identity() {
        let f = svd(&Matrix::identity(3)).unwrap();
        assert_eq!(f.sigma, vec![1.0, 1.0, 1.0]);
        let uv = f.u.matmul_bt(&f.v);
        assert!(uv.sub(&Matrix::identity(3)).max_abs() <= 1e-12);
    }

    #[test]
    fn svd_diagonal() {
        let m = Matrix::diag(&[3.0, 2.0]);
        let f = svd(&m).unwrap();
        assert_close(f.sigma[0], 3.0, 1e-12, "sigma0");
        assert_close(f.sigma[1], 2.0, 1e-12, "sigma1");
        check_factors(&m, &f);
    }

    #[test]
    fn svd_m1_matches_characteristic_polynomial() {
        // Oracle: eigenvalues of M1^T M1 from the quadratic characteristic
        // polynomial, computed by hand arithmetic on the 2x2 Gram matrix.
        let m = m1();
        let g = m.gram(); // [[50, -4], [-4, 3]]
        assert_close(g.get(0, 0), 50.0, 1e-12, "g00");
        assert_close(g.get(0, 1), -4.0, 1e-12, "g01");
        assert_close(g.get(1, 1), 3.0, 1e-12, "g11");
        let tr = 53.0_f64;
        let det = 50.0_f64 * 3.0 - 16.0;
        let disc = (tr * tr - 4.0 * det).sqrt();
        let l1 = (tr + disc) / 2.0;
        let l2 = (tr - disc) / 2.0;

        let f = svd(&m).unwrap();
        check_factors(&m, &f);
        assert_close(f.sigma[0], l1.sqrt(), 1e-10, "sigma0");
        assert_close(f.sigma[1], l2.sqrt(), 1e-10, "sigma1");
        // product of singular values = sqrt(det(M^T M))
        assert_close(f.sigma[0] * f.sigma[1], det.sqrt(), 1e-10, "psdet");
        assert_close(psdet(&m).unwrap(), det.sqrt(), 1e-10, "psdet op");
    }

    #[test]
    fn svd_wide_matrix() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.5, -1.0, 2.0]]).unwrap();
        let f = svd(&m).unwrap();
        assert_eq!(f.v.rows(), 3);
        assert_eq!(f.v.cols(), 3);
        check_factors(&m, &f);
    }

    #[test]
    fn svd_rank_deficient_column() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0], vec![3.0, 0.0]]).unwrap();
        let f = svd(&m).unwrap();
        check_factors(&m, &f);
        assert!(f.sigma[1].abs() < 1e-12);
        assert!(matches!(psdet(&m), Err(LinalgError::RankDeficient { .. })));
    }

    #[test]
    fn psdet_trivial_cases() {
        assert_close(psdet(&Matrix::identity(4)).unwrap(), 1.0, 1e-12, "identity");
        assert_close(psdet(&Matrix::diag(&[2.0, 5.0])).unwrap(), 10.0, 1e-12, "diag");
    }

    #[test]
    fn cholesky_trivial_and_constructed() {
        let l = cholesky_factor(&Matrix::identity(3)).unwrap();
        assert!(l.sub(&Matrix::identity(3)).max_abs() <= 1e-14);

        let l = cholesky_factor(&Matrix::diag(&[4.0, 9.0])).unwrap();
        assert!(l.sub(&Matrix::diag(&[2.0, 3.0])).max_abs() <= 1e-14);

        // random SPD built from a known B
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = Matrix::from_fn(4, 4, |_, _| standard_normal(&mut rng));
        let spd = b.matmul_bt(&b).add(&Matrix::identity(4).scale(1e-3));
        let l = cholesky_factor(&spd).unwrap();
        let rec = l.matmul_bt(&l);
        assert!(rec.sub(&spd).max_abs() <= tol::CHOLESKY_RECONSTRUCTION * spd.max_abs().max(1.0));
        // uniqueness: re-factoring L L^T returns L
        let l2 = cholesky_factor(&rec).unwrap();
        assert!(l2.sub(&l).max_abs() <= 1e-9);
    }

    #[test]
    fn cholesky_rejects_non_spd() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(cholesky_factor(&m), Err(LinalgError::NotPositiveDefinite)));
        let asym = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.2, 1.0]]).unwrap();
        assert!(matches!(cholesky_factor(&asym), Err(LinalgError::NotSymmetric(_))));
    }

    #[test]
    fn random_orthogonal_properties() {
        for seed in 0..5_u64 {
            for dim in [1usize, 2, 3, 6] {
                let q = random_orthogonal(dim, seed);
                let qtq = q.gram();
                assert!(qtq.sub(&Matrix::identity(dim)).max_abs() <= tol::ORTHOGONAL_QTQ);
                let det = determinant(&q).unwrap();
                assert!((det.abs() - 1.0).abs() <= 1e-9, "det {det}");
            }
        }
        let q1 = random_orthogonal(1, 3);
        assert!((q1.get(0, 0).abs() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn rotation_2d_basics() {
        assert!(rotation_2d(0.0).sub(&Matrix::identity(2)).max_abs() <= 1e-15);
        let t = 0.7;
        let comp = rotation_2d(t).matmul(&rotation_2d(-t));
        assert!(comp.sub(&Matrix::identity(2)).max_abs() <= 1e-15);
    }

    #[test]
    fn rotation_45_column_norms() {
        // M2 = M1 R45^T has squared column norms 61/2 and 45/2.
        let m2 = m1().matmul_bt(&rotation_2d(std::f64::consts::FRAC_PI_4));
        let g = m2.gram();
        assert_close(g.get(0, 0), 30.5, 1e-12, "col1 norm^2");
        assert_close(g.get(1, 1), 22.5, 1e-12, "col2 norm^2");
    }

    #[test]
    fn eigh_matches_known_spectrum() {
        let q = random_orthogonal(4, 11);
        let target = [5.0, 2.0, 1.0, 0.25];
        let m = q.matmul(&Matrix::diag(&target)).matmul_bt(&q);
        let (vals, vecs) = eigh_symmetric(&m).unwrap();
        for (a, b) in vals.iter().zip(target.iter()) {
            assert_close(*a, *b, 1e-9, "eigenvalue");
        }
        let rec = vecs.matmul(&Matrix::diag(&vals)).matmul_bt(&vecs);
        assert!(rec.sub(&m).max_abs() <= 1e-9);
    }

    #[test]
    fn solve_lower_triangular_roundtrip() {
        let l = Matrix::from_rows(&[vec![2.0, 0.0], vec![1.0, 3.0]]).unwrap();
        let x = vec![0.5, -1.25];
        let b = l.matvec(&x);
        let got = solve_lower_triangular(&l, &b);
        for (a, b) in got.iter().zip(&x) {
            assert_close(*a, *b, 1e-12, "solve");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn svd_random_matrices(seed in 0u64..10_000, n in 1usize..=8, d in 1usize..=6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = Matrix::from_fn(n, d, |_, _| standard_normal(&mut rng));
            let f = svd(&m).unwrap();
            check_factors(&m, &f);

            // singular values match sqrt eigenvalues of M^T M (independent route)
            let (mut evals, _) = eigh_symmetric(&m.gram()).unwrap();
            evals.truncate(f.sigma.len());
            let scale = f.sigma[0].max(1e-12);
            for (s, l) in f.sigma.iter().zip(evals.iter()) {
                let root = l.max(0.0).sqrt();
                prop_assert!((s - root).abs() <= 1e-8 * scale.max(1.0), "sv {s} vs {root}");
            }
        }

        #[test]
        fn psdet_isometry_invariance(seed in 0u64..10_000, n in 2usize..=6, d in 1usize..=4) {
            prop_assume!(d <= n);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = Matrix::from_fn(n, d, |_, _| standard_normal(&mut rng));
            if let Ok(p) = psdet(&m) {
                let q = random_orthogonal_with(n, &mut rng);
                let p2 = psdet(&q.matmul(&m)).unwrap();
                prop_assert!((p - p2).abs() <= 1e-8 * p.max(1.0));
            }
        }
    }
}
