//! Small dense matrix kernels: products, a one-sided Jacobi SVD and a
//! pseudo-inverse solve for normal equations.
//!
//! Every matrix handled here is at most a few hundred rows or columns, so
//! the kernels favour accuracy and simplicity over blocking.

use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape(format!("matrix extents must be >= 1, got {rows}x{cols}")));
        }
        if rows * cols != data.len() {
            return Err(Error::shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix extents must be >= 1");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix extents must be >= 1");
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Builds a matrix from row slices; all rows must share a length.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let rows = columns.first().map_or(0, |c| c.len());
        if columns.iter().any(|c| c.len() != rows) {
            return Err(Error::shape("ragged columns"));
        }
        let cols = columns.len();
        let mut m = Matrix::new(rows, cols, vec![0.0; rows * cols])?;
        for (j, col) in columns.iter().enumerate() {
            m.set_column(j, col);
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.data[r * self.cols + c]).collect()
    }

    pub fn set_column(&mut self, c: usize, values: &[f64]) {
        assert_eq!(values.len(), self.rows);
        for (r, v) in values.iter().enumerate() {
            self.data[r * self.cols + c] = *v;
        }
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::shape(format!(
                "cannot multiply ({}x{})ᵀ by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, a) in a_row.iter().enumerate() {
                if *a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(format!(
                "hadamard of {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape("matrix difference of mismatched shapes"));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm2(&self.data)
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Euclidean norm with scaling to avoid overflow of intermediate squares.
pub fn norm2(v: &[f64]) -> f64 {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    let ss: f64 = v.iter().map(|x| (x / scale) * (x / scale)).sum();
    scale * ss.sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Thin singular value decomposition `m = U·diag(s)·Vᵀ`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// rows × k, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, non-negative; length k = min(rows, cols).
    pub s: Vec<f64>,
    /// cols × k, orthonormal columns.
    pub v: Matrix,
}

impl Svd {
    /// `U[:, ..rank]·diag(s[..rank])·V[:, ..rank]ᵀ`.
    pub fn truncated(&self, rank: usize) -> Matrix {
        let rank = rank.min(self.s.len());
        Matrix::from_fn(self.u.rows(), self.v.rows(), |i, j| {
            (0..rank).map(|r| self.u[(i, r)] * self.s[r] * self.v[(j, r)]).sum()
        })
    }
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Singular value decomposition by one-sided Jacobi rotations.
///
/// Wide matrices are handled through their transpose so the rotated side is
/// always the smaller one. Columns of `U` belonging to zero singular values
/// are completed to an orthonormal set.
pub fn svd(m: &Matrix) -> Result<Svd> {
    if m.rows() < m.cols() {
        let t = svd(&m.transpose())?;
        return Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        });
    }
    let (rows, cols) = (m.rows(), m.cols());
    // Work column-major: each column of A is a contiguous vector.
    let mut a: Vec<Vec<f64>> = (0..cols).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..cols).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let eps = f64::EPSILON;
    let tol = eps * (rows as f64);
    // Columns whose squared norm falls below this are numerically null and
    // left alone; rotating them only churns rounding noise.
    let total: f64 = a.iter().map(|c| dot(c, c)).sum();
    let null = total * eps * eps;
    let mut converged = cols == 1;
    let mut sweeps = 0;
    while !converged {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::Numerical(format!(
                "Jacobi SVD did not converge after {sweeps} sweeps"
            )));
        }
        sweeps += 1;
        converged = true;
        for p in 0..cols - 1 {
            for q in p + 1..cols {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if alpha <= null || beta <= null || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                converged = false;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
    }

    let mut order: Vec<(f64, usize)> = a.iter().enumerate().map(|(j, col)| (norm2(col), j)).collect();
    order.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));

    let smax = order.first().map_or(0.0, |o| o.0);
    let tiny = smax * (rows.max(cols) as f64) * eps;
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut s = Vec::with_capacity(cols);
    let mut v_cols = Vec::with_capacity(cols);
    for &(sigma, j) in &order {
        v_cols.push(v[j].clone());
        if sigma > tiny && sigma > 0.0 {
            s.push(sigma);
            u_cols.push(a[j].iter().map(|x| x / sigma).collect());
        } else {
            s.push(if sigma > tiny { sigma } else { 0.0 });
            u_cols.push(Vec::new());
        }
    }
    complete_orthonormal(&mut u_cols, rows);

    Ok(Svd {
        u: Matrix::from_columns(&u_cols)?,
        s,
        v: Matrix::from_columns(&v_cols)?,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills empty entries of `cols` with unit vectors orthogonal to the rest,
/// then re-orthogonalizes every column once against its predecessors.
fn complete_orthonormal(cols: &mut [Vec<f64>], dim: usize) {
    let mut next_basis = 0;
    for j in 0..cols.len() {
        if !cols[j].is_empty() {
            continue;
        }
        loop {
            assert!(next_basis < dim, "cannot complete orthonormal basis");
            let mut cand = vec![0.0; dim];
            cand[next_basis] = 1.0;
            next_basis += 1;
            for _ in 0..2 {
                for other in cols.iter().filter(|c| !c.is_empty()) {
                    let d = dot(&cand, other);
                    for (x, o) in cand.iter_mut().zip(other) {
                        *x -= d * o;
                    }
                }
            }
            let n = norm2(&cand);
            if n > 1e-6 {
                cols[j] = cand.iter().map(|x| x / n).collect();
                break;
            }
        }
    }
}

/// Relative cutoff below which singular values of a Gram matrix are dropped.
pub const PINV_RCOND: f64 = 1e-12;

/// Pseudo-inverse of a matrix via its SVD, with relative cutoff `rcond`.
pub fn pinv(m: &Matrix, rcond: f64) -> Result<Matrix> {
    let d = svd(m)?;
    let cutoff = rcond * d.s.first().copied().unwrap_or(0.0);
    Ok(Matrix::from_fn(m.cols(), m.rows(), |i, j| {
        d.s.iter()
            .enumerate()
            .filter(|(_, s)| **s > cutoff && **s > 0.0)
            .map(|(r, s)| d.v[(i, r)] * d.u[(j, r)] / s)
            .sum()
    }))
}

/// Minimum-norm least-squares solution of `gram · X = rhs` for a symmetric
/// positive semi-definite `gram`.
pub fn lstsq_gram(gram: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    if gram.rows() != gram.cols() || gram.rows() != rhs.rows() {
        return Err(Error::shape(format!(
            "gram {}x{} incompatible with rhs {}x{}",
            gram.rows(),
            gram.cols(),
            rhs.rows(),
            rhs.cols()
        )));
    }
    pinv(gram, PINV_RCOND)?.matmul(rhs)
}
