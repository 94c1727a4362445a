//! Dense FP64 linear algebra used by every other module.
//!
//! Experts map `x ∈ R^{d_in}` to `y ∈ R^{d_out}`, so a weight matrix is
//! `d_out × d_in` and a low-rank delta is `A·Bᵀ` with `A: d_out × r` and
//! `B: d_in × r`, applied as `A·(Bᵀ·x)`.

use serde::{Deserialize, Serialize};

use crate::error::{MoeError, Result};

/// Sweep cap for the one-sided Jacobi SVD.
pub const SVD_MAX_SWEEPS: usize = 100;
/// Relative off-diagonal tolerance for the one-sided Jacobi SVD.
pub const SVD_TOLERANCE: f64 = 1e-12;

/// Row-major dense matrix with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(MoeError::shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(MoeError::NonFinite(format!("matrix entry {pos}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Builds a matrix from a generator; callers must produce finite values.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { rows, cols, data }
    }

    /// `u·vᵀ`
    pub fn outer(u: &[f64], v: &[f64]) -> Self {
        Self::from_fn(u.len(), v.len(), |i, j| u[i] * v[j])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the raw entries. Writers must keep entries finite.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(MoeError::shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for p in 0..self.cols {
                let a = self.get(i, p);
                if a == 0.0 {
                    continue;
                }
                let src = other.row(p);
                let dst = out.row_mut(i);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_transposed(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(MoeError::shape(format!(
                "matmul {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix::from_fn(self.rows, other.rows, |i, j| dot(self.row(i), other.row(j))))
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(MoeError::shape(format!(
                "matvec {}x{} by vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `selfᵀ · x`
    pub fn matvec_transposed(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(MoeError::shape(format!(
                "transposed matvec {}x{} by vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.row(i)) {
                *o += xi * w;
            }
        }
        Ok(out)
    }

    fn zip_with(&self, other: &Matrix, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(MoeError::shape(format!(
                "{op} of {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sum", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "difference", |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }
}

/// Low-rank factor pair representing `A·Bᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorPair {
    /// `d_out × r`
    pub a: Matrix,
    /// `d_in × r`
    pub b: Matrix,
}

impl FactorPair {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        if a.cols() != b.cols() {
            return Err(MoeError::shape(format!(
                "factor ranks differ: A has {} columns, B has {}",
                a.cols(),
                b.cols()
            )));
        }
        let rank = a.cols();
        if rank == 0 || rank > a.rows().min(b.rows()) {
            return Err(MoeError::invalid(format!(
                "rank {rank} outside [1, {}]",
                a.rows().min(b.rows())
            )));
        }
        Ok(Self { a, b })
    }

    pub fn zeros(d_out: usize, d_in: usize, rank: usize) -> Self {
        Self { a: Matrix::zeros(d_out, rank), b: Matrix::zeros(d_in, rank) }
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.a.rows()
    }

    pub fn d_in(&self) -> usize {
        self.b.rows()
    }

    /// Dense `A·Bᵀ`.
    pub fn product(&self) -> Matrix {
        self.a
            .matmul_transposed(&self.b)
            .expect("factor ranks checked on construction")
    }

    /// `A·(Bᵀ·x)` without materialising the product.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let h = self.b.matvec_transposed(x)?;
        self.a.matvec(&h)
    }

    pub fn element_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// Tally of scalar multiplications performed by instrumented kernels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MulCounter {
    pub mults: u64,
}

impl MulCounter {
    pub fn add(&mut self, n: usize) {
        self.mults += n as u64;
    }
}

#[inline]
pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

#[inline]
pub fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// Cosine of the angle between `u` and `v`, clamped to `[-1, 1]`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(MoeError::shape(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let uu = dot(u, u);
    let vv = dot(v, v);
    if uu == 0.0 || vv == 0.0 {
        return Err(MoeError::ZeroVector);
    }
    Ok((dot(u, v) / (uu * vv).sqrt()).clamp(-1.0, 1.0))
}

/// `‖m − approx‖_F / ‖m‖_F`
pub fn frobenius_rel_error(m: &Matrix, approx: &Matrix) -> Result<f64> {
    let diff = m.sub(approx)?;
    let denom = m.frobenius_norm();
    if denom == 0.0 {
        return Err(MoeError::invalid("relative error against an all-zero matrix"));
    }
    Ok(diff.frobenius_norm() / denom)
}

/// Thin singular value decomposition `m = U·diag(s)·Vᵀ`.
///
/// Singular values are sorted in descending order and the first nonzero
/// entry of every left singular vector is positive.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `rows × min(rows, cols)`
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    /// `cols × min(rows, cols)`
    pub v: Matrix,
    pub sweeps: usize,
}

/// One-sided (Hestenes) Jacobi SVD.
pub fn jacobi_svd(m: &Matrix) -> Result<Svd> {
    if m.is_empty() {
        return Err(MoeError::invalid("SVD of an empty matrix"));
    }
    // Orthogonalise the columns of the taller orientation.
    let transposed = m.rows() < m.cols();
    let work = if transposed { m.transpose() } else { m.clone() };
    let (rows, n) = work.shape();

    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| work.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut sweeps = 0;
    let mut converged = false;
    let mut residual = 0.0_f64;
    while sweeps < SVD_MAX_SWEEPS {
        sweeps += 1;
        residual = 0.0;
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if alpha == 0.0 || beta == 0.0 || gamma == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(off);
                if off <= SVD_TOLERANCE {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(MoeError::SvdNonConvergence { sweeps, residual });
    }

    let mut order: Vec<(usize, f64)> = cols.iter().map(|c| norm(c)).enumerate().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let k = n.min(rows);
    let mut left = Matrix::zeros(rows, k);
    let mut right = Matrix::zeros(n, k);
    let mut singular_values = Vec::with_capacity(k);
    for (slot, &(j, sigma)) in order.iter().take(k).enumerate() {
        singular_values.push(sigma);
        if sigma > 0.0 {
            for i in 0..rows {
                left.set(i, slot, cols[j][i] / sigma);
            }
        }
        for i in 0..n {
            right.set(i, slot, vcols[j][i]);
        }
    }

    let (mut u, mut v) = if transposed { (right, left) } else { (left, right) };
    for slot in 0..k {
        let first = (0..u.rows()).map(|i| u.get(i, slot)).find(|x| *x != 0.0);
        if matches!(first, Some(x) if x < 0.0) {
            for i in 0..u.rows() {
                u.set(i, slot, -u.get(i, slot));
            }
            for i in 0..v.rows() {
                v.set(i, slot, -v.get(i, slot));
            }
        }
    }
    Ok(Svd { u, singular_values, v, sweeps })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Best rank-`r` approximation in Frobenius norm, returned as `A = U_r·Σ_r`,
/// `B = V_r`.
pub fn truncated_svd(m: &Matrix, r: usize) -> Result<FactorPair> {
    let max_rank = m.rows().min(m.cols());
    if r == 0 || r > max_rank {
        return Err(MoeError::invalid(format!("rank {r} outside [1, {max_rank}]")));
    }
    let svd = jacobi_svd(m)?;
    let a = Matrix::from_fn(m.rows(), r, |i, j| svd.u.get(i, j) * svd.singular_values[j]);
    let b = Matrix::from_fn(m.cols(), r, |i, j| svd.v.get(i, j));
    Ok(FactorPair { a, b })
}
