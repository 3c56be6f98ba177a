//! Dense linear algebra: the row-major [`DenseMatrix`] container, Cholesky
//! factorization, symmetric eigendecomposition and the low-rank
//! (Woodbury / matrix-determinant-lemma) fast paths used by the likelihood.
//!
//! Everything here is single-threaded and runs in a fixed floating point
//! order, so identical inputs give bit-identical outputs.

use std::fmt;
use std::ops::{Index, IndexMut};

use thiserror::Error;

/// Relative tolerance used when checking that an input matrix is symmetric.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Sweep cap for the implicit QL iteration of [`sym_eig`].
pub const EIG_MAX_SWEEPS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot:e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("matrix is not symmetric: |a[{row},{col}] - a[{col},{row}]| = {diff:e}")]
    SymmetryViolation { row: usize, col: usize, diff: f64 },
    #[error("eigenvalue iteration did not converge within {0} sweeps")]
    NoConvergence(usize),
    #[error("noise variance must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },
    #[error("least-squares design is rank deficient (column {0})")]
    RankDeficient(usize),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

fn dims(r: usize, c: usize) -> String {
    format!("{r}x{c}")
}

/// Row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            write!(f, "  ")?;
            for c in 0..self.cols.min(8) {
                write!(f, "{:>12.6} ", self[(r, c)])?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Wraps a row-major buffer. Fails when `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch {
                expected: format!("{} values", rows * cols),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(LinalgError::DimensionMismatch {
                    expected: format!("{cols} columns"),
                    got: format!("{} columns in row {i}", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Column vector from a slice.
    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn set_col(&mut self, c: usize, values: &[f64]) {
        for (r, v) in values.iter().enumerate() {
            self[(r, c)] = *v;
        }
    }

    /// The single entry of a 1x1 matrix.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(LinalgError::DimensionMismatch {
                expected: dims(self.rows, self.cols),
                got: dims(other.rows, other.cols),
            });
        }
        Ok(())
    }

    /// `self · other`. Each output entry accumulates over the inner index in
    /// ascending order.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(LinalgError::DimensionMismatch {
                expected: format!("{} rows on the right operand", self.cols),
                got: dims(other.rows, other.cols),
            });
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = Self::zeros(n, m);
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out.data[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(LinalgError::DimensionMismatch {
                expected: format!("{} rows on the right operand", self.rows),
                got: dims(other.rows, other.cols),
            });
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = Self::zeros(k, m);
        for p in 0..n {
            let a_row = &self.data[p * k..(p + 1) * k];
            let b_row = &other.data[p * m..(p + 1) * m];
            for (i, &a) in a_row.iter().enumerate() {
                let o_row = &mut out.data[i * m..(i + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`; entry (i, j) is the dot product of row i and row j.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(LinalgError::DimensionMismatch {
                expected: format!("{} columns on the right operand", self.cols),
                got: dims(other.rows, other.cols),
            });
        }
        let mut out = Self::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · self`, exactly symmetric.
    pub fn gram(&self) -> Self {
        let (n, k) = (self.rows, self.cols);
        let mut out = Self::zeros(k, k);
        for p in 0..n {
            let row = &self.data[p * k..(p + 1) * k];
            for i in 0..k {
                let a = row[i];
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out.data[i * k..i * k + i + 1];
                for (o, &b) in o_row.iter_mut().zip(&row[..=i]) {
                    *o += a * b;
                }
            }
        }
        for i in 0..k {
            for j in 0..i {
                out.data[j * k + i] = out.data[i * k + j];
            }
        }
        out
    }

    /// `self · selfᵀ`, exactly symmetric.
    pub fn outer_gram(&self) -> Self {
        let n = self.rows;
        let mut out = Self::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = dot(self.row(i), self.row(j));
                out.data[i * n + j] = v;
                out.data[j * n + i] = v;
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(LinalgError::DimensionMismatch {
                expected: format!("vector of length {}", self.cols),
                got: format!("length {}", x.len()),
            });
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `selfᵀ · x`.
    pub fn t_matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(LinalgError::DimensionMismatch {
                expected: format!("vector of length {}", self.rows),
                got: format!("length {}", x.len()),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(r)) {
                *o += a * xr;
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination; shapes must already agree.
    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape(), other.shape());
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_diag(&mut self, value: f64) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            self.data[i * self.cols + i] += value;
        }
    }

    /// Copies the given rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &r in idx {
            data.extend_from_slice(self.row(r));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn select_cols(&self, idx: &[usize]) -> Self {
        Self::from_fn(self.rows, idx.len(), |r, c| self[(r, idx[c])])
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Checks `|a_ij - a_ji| <= SYMMETRY_TOL * max(1, max|a|)`.
    pub fn check_symmetric(&self) -> Result<()> {
        if !self.is_square() {
            return Err(LinalgError::DimensionMismatch {
                expected: "square matrix".into(),
                got: dims(self.rows, self.cols),
            });
        }
        let tol = SYMMETRY_TOL * self.max_abs().max(1.0);
        for i in 0..self.rows {
            for j in 0..i {
                let diff = (self[(i, j)] - self[(j, i)]).abs();
                if diff > tol || diff.is_nan() {
                    return Err(LinalgError::SymmetryViolation {
                        row: i,
                        col: j,
                        diff,
                    });
                }
            }
        }
        Ok(())
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Sequential dot product, accumulated from index 0 upward.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Lower-triangular Cholesky factor `A = L·Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DenseMatrix,
}

impl Cholesky {
    /// Factorizes a symmetric positive-definite matrix. Only the lower
    /// triangle is read; call [`DenseMatrix::check_symmetric`] first when the
    /// input is untrusted.
    pub fn new(a: &DenseMatrix) -> Result<Self> {
        if !a.is_square() {
            return Err(LinalgError::DimensionMismatch {
                expected: "square matrix".into(),
                got: dims(a.rows, a.cols),
            });
        }
        let n = a.rows;
        let mut l = DenseMatrix::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if d <= 0.0 || !d.is_finite() {
                return Err(LinalgError::NotPositiveDefinite { index: j, pivot: d });
            }
            let d = d.sqrt();
            l[(j, j)] = d;
            for i in j + 1..n {
                let mut s = a[(i, j)];
                let (ri, rj) = (i * n, j * n);
                for k in 0..j {
                    s -= l.data[ri + k] * l.data[rj + k];
                }
                l[(i, j)] = s / d;
            }
        }
        Ok(Self { l })
    }

    pub fn factor(&self) -> &DenseMatrix {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.rows
    }

    /// `log|A| = 2 Σ log L_ii`.
    pub fn logdet(&self) -> f64 {
        2.0 * (0..self.dim()).map(|i| self.l[(i, i)].ln()).sum::<f64>()
    }

    /// Solves `L z = b` in place.
    pub fn forward_in_place(&self, b: &mut [f64]) {
        let n = self.dim();
        for i in 0..n {
            let row = self.l.row(i);
            let mut s = b[i];
            for k in 0..i {
                s -= row[k] * b[k];
            }
            b[i] = s / row[i];
        }
    }

    /// Solves `Lᵀ x = z` in place.
    pub fn backward_in_place(&self, b: &mut [f64]) {
        let n = self.dim();
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n {
                s -= self.l[(k, i)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
    }

    pub fn solve_vec(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.dim() {
            return Err(LinalgError::DimensionMismatch {
                expected: format!("vector of length {}", self.dim()),
                got: format!("length {}", b.len()),
            });
        }
        let mut x = b.to_vec();
        self.forward_in_place(&mut x);
        self.backward_in_place(&mut x);
        Ok(x)
    }

    /// Solves `A X = B` column by column.
    pub fn solve(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        if b.rows != self.dim() {
            return Err(LinalgError::DimensionMismatch {
                expected: format!("{} rows", self.dim()),
                got: dims(b.rows, b.cols),
            });
        }
        let mut out = DenseMatrix::zeros(b.rows, b.cols);
        let mut buf = vec![0.0; b.rows];
        for c in 0..b.cols {
            for r in 0..b.rows {
                buf[r] = b[(r, c)];
            }
            self.forward_in_place(&mut buf);
            self.backward_in_place(&mut buf);
            out.set_col(c, &buf);
        }
        Ok(out)
    }

    pub fn inverse(&self) -> DenseMatrix {
        let n = self.dim();
        let mut inv = self
            .solve(&DenseMatrix::identity(n))
            .expect("identity has matching dimension");
        // symmetrize away the last-bit asymmetry of the column solves
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (inv[(i, j)] + inv[(j, i)]);
                inv[(i, j)] = v;
                inv[(j, i)] = v;
            }
        }
        inv
    }
}

/// Log-determinant of an SPD matrix `A` and the solution of `A X = B`.
pub fn cholesky_logdet_solve(a: &DenseMatrix, b: &DenseMatrix) -> Result<(f64, DenseMatrix)> {
    a.check_symmetric()?;
    let chol = Cholesky::new(a)?;
    let x = chol.solve(b)?;
    Ok((chol.logdet(), x))
}

/// Eigenpairs of a symmetric matrix, eigenvalues in descending order.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub values: Vec<f64>,
    /// Column `k` is the unit eigenvector for `values[k]`.
    pub vectors: DenseMatrix,
}

impl EigenDecomposition {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn vector(&self, k: usize) -> Vec<f64> {
        self.vectors.col(k)
    }

    /// `V Λ Vᵀ`.
    pub fn reconstruct(&self) -> DenseMatrix {
        let n = self.vectors.rows();
        let mut scaled = self.vectors.clone();
        for r in 0..n {
            for (c, v) in scaled.row_mut(r).iter_mut().enumerate() {
                *v *= self.values[c];
            }
        }
        scaled.matmul_t(&self.vectors).expect("square factors")
    }
}

/// Symmetric eigendecomposition by Householder tridiagonalization followed by
/// the implicit QL algorithm.
pub fn sym_eig(a: &DenseMatrix) -> Result<EigenDecomposition> {
    a.check_symmetric()?;
    let n = a.rows();
    if n == 0 {
        return Ok(EigenDecomposition {
            values: Vec::new(),
            vectors: DenseMatrix::zeros(0, 0),
        });
    }
    let mut v = a.clone();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(&mut v, &mut d, &mut e);
    tridiagonal_ql(&mut v, &mut d, &mut e)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[j].total_cmp(&d[i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| d[i]).collect();
    let vectors = v.select_cols(&order);
    Ok(EigenDecomposition { values, vectors })
}

// Householder reduction to tridiagonal form (EISPACK tred2). On exit `v`
// holds the accumulated orthogonal transform, `d` the diagonal and `e` the
// subdiagonal in e[1..n].
fn tridiagonalize(v: &mut DenseMatrix, d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    for j in 0..n {
        d[j] = v[(n - 1, j)];
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for k in 0..i {
            scale += d[k].abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[(i - 1, j)];
                v[(i, j)] = 0.0;
                v[(j, i)] = 0.0;
            }
        } else {
            for k in 0..i {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = 0.0;
            }
            for j in 0..i {
                f = d[j];
                v[(j, i)] = f;
                g = e[j] + v[(j, j)] * f;
                for k in j + 1..i {
                    g += v[(k, j)] * d[k];
                    e[k] += v[(k, j)] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[(k, j)] -= f * e[k] + g * d[k];
                }
                d[j] = v[(i - 1, j)];
                v[(i, j)] = 0.0;
            }
        }
        d[i] = h;
    }
    for i in 0..n - 1 {
        v[(n - 1, i)] = v[(i, i)];
        v[(i, i)] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[(k, i + 1)] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[(k, i + 1)] * v[(k, j)];
                }
                for k in 0..=i {
                    v[(k, j)] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[(k, i + 1)] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[(n - 1, j)];
        v[(n - 1, j)] = 0.0;
    }
    v[(n - 1, n - 1)] = 1.0;
    e[0] = 0.0;
}

// Implicit QL with Wilkinson-style shifts on the tridiagonal (d, e)
// (EISPACK tql2), accumulating rotations into `v`.
fn tridiagonal_ql(v: &mut DenseMatrix, d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let mut f = 0.0;
    let mut tst1: f64 = 0.0;
    let eps = f64::EPSILON;
    let mut sweeps = 0usize;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            loop {
                sweeps += 1;
                if sweeps > EIG_MAX_SWEEPS {
                    return Err(LinalgError::NoConvergence(EIG_MAX_SWEEPS));
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for k in 0..n {
                        let vk = v.row_mut(k);
                        let h = vk[i + 1];
                        vk[i + 1] = s * vk[i] + c * h;
                        vk[i] = c * vk[i] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}

fn check_sigma2(sigma2: f64) -> Result<()> {
    if sigma2 > 0.0 && sigma2.is_finite() {
        Ok(())
    } else {
        Err(LinalgError::NonPositiveSigma(sigma2))
    }
}

/// Cholesky factor of the `R x R` capacitance matrix `I + ΦᵀΦ/σ²`, shared by
/// the low-rank log-determinant and solve.
#[derive(Debug, Clone)]
pub struct LowRankFactor {
    pub sigma2: f64,
    pub n: usize,
    pub chol: Cholesky,
}

impl LowRankFactor {
    /// Builds the factor from a precomputed `ΦᵀΦ`.
    pub fn from_gram(phi_gram: &DenseMatrix, n: usize, sigma2: f64) -> Result<Self> {
        check_sigma2(sigma2)?;
        let inv = 1.0 / sigma2;
        let mut cap = phi_gram.scale(inv);
        cap.add_diag(1.0);
        let chol = Cholesky::new(&cap)?;
        Ok(Self { sigma2, n, chol })
    }

    pub fn new(phi: &DenseMatrix, sigma2: f64) -> Result<Self> {
        Self::from_gram(&phi.gram(), phi.rows(), sigma2)
    }

    /// `log|ΦΦᵀ + σ²I| = N log σ² + log|I + ΦᵀΦ/σ²|`.
    pub fn logdet(&self) -> f64 {
        self.n as f64 * self.sigma2.ln() + self.chol.logdet()
    }

    /// `(ΦΦᵀ+σ²I)⁻¹ y = (y − Φ(σ²I + ΦᵀΦ)⁻¹Φᵀy)/σ²`.
    pub fn solve(&self, phi: &DenseMatrix, y: &[f64]) -> Result<Vec<f64>> {
        let mut t = phi.t_matvec(y)?;
        // (σ²I + ΦᵀΦ)⁻¹ = (σ² B)⁻¹ with B the capacitance matrix
        self.chol.forward_in_place(&mut t);
        self.chol.backward_in_place(&mut t);
        let inv = 1.0 / self.sigma2;
        let proj = phi.matvec(&t)?;
        Ok(y
            .iter()
            .zip(&proj)
            .map(|(yi, pi)| (yi - pi * inv) * inv)
            .collect())
    }
}

/// `log|ΦΦᵀ + σ²I_N|` in `O(N R²)`.
pub fn woodbury_logdet(phi: &DenseMatrix, sigma2: f64) -> Result<f64> {
    Ok(LowRankFactor::new(phi, sigma2)?.logdet())
}

/// Returns `(yᵀC⁻¹y, C⁻¹y)` for `C = ΦΦᵀ + σ²I_N` in `O(N R²)`.
pub fn woodbury_quad_solve(phi: &DenseMatrix, sigma2: f64, y: &[f64]) -> Result<(f64, Vec<f64>)> {
    if y.len() != phi.rows() {
        return Err(LinalgError::DimensionMismatch {
            expected: format!("vector of length {}", phi.rows()),
            got: format!("length {}", y.len()),
        });
    }
    let factor = LowRankFactor::new(phi, sigma2)?;
    let cinv_y = factor.solve(phi, y)?;
    Ok((dot(y, &cinv_y), cinv_y))
}

/// Least-squares solution of `A x ≈ B` by Householder QR. Columns of `A`
/// whose reduced diagonal falls below `1e-10 · max|R_ii|` are reported as
/// rank deficient.
pub fn least_squares(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    let (n, p) = a.shape();
    if b.rows() != n {
        return Err(LinalgError::DimensionMismatch {
            expected: format!("{n} rows"),
            got: dims(b.rows(), b.cols()),
        });
    }
    if n < p {
        return Err(LinalgError::RankDeficient(n));
    }
    let mut qr = a.clone();
    let mut rhs = b.clone();
    let mut rdiag = vec![0.0; p];
    for k in 0..p {
        let mut nrm = 0.0f64;
        for i in k..n {
            nrm = nrm.hypot(qr[(i, k)]);
        }
        if nrm != 0.0 {
            if qr[(k, k)] < 0.0 {
                nrm = -nrm;
            }
            for i in k..n {
                qr[(i, k)] /= nrm;
            }
            qr[(k, k)] += 1.0;
            for j in k + 1..p {
                let mut s = 0.0;
                for i in k..n {
                    s += qr[(i, k)] * qr[(i, j)];
                }
                s = -s / qr[(k, k)];
                for i in k..n {
                    let v = qr[(i, k)];
                    qr[(i, j)] += s * v;
                }
            }
            for j in 0..rhs.cols() {
                let mut s = 0.0;
                for i in k..n {
                    s += qr[(i, k)] * rhs[(i, j)];
                }
                s = -s / qr[(k, k)];
                for i in k..n {
                    let v = qr[(i, k)];
                    rhs[(i, j)] += s * v;
                }
            }
        }
        rdiag[k] = -nrm;
    }
    let rmax = rdiag.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (k, r) in rdiag.iter().enumerate() {
        if r.abs() <= 1e-10 * rmax || rmax == 0.0 {
            return Err(LinalgError::RankDeficient(k));
        }
    }
    let mut x = DenseMatrix::zeros(p, rhs.cols());
    for j in 0..rhs.cols() {
        for k in (0..p).rev() {
            let mut s = rhs[(k, j)];
            for i in k + 1..p {
                s -= qr[(k, i)] * x[(i, j)];
            }
            x[(k, j)] = s / rdiag[k];
        }
    }
    Ok(x)
}
