//! Dense row-major linear algebra on `f64`.
//!
//! Everything here is sized for the desk-scale problems in this crate (a few
//! hundred rows at most): no blocking, no sparsity, no SIMD tricks.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative pivot threshold below which Cholesky reports the matrix as not SPD.
const PIVOT_RTOL: f64 = 1e-12;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
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
        if rows * cols != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
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

    /// Builds a matrix from equally long rows.
    ///
    /// Panics on ragged input; this is meant for literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
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

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "matmul {}x{} by {}x{}",
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
            return Err(Error::DimensionMismatch(format!(
                "t_matmul {}x{}ᵀ by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
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

    fn check_same_shape(&self, other: &Matrix, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch(format!(
                "{op} {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        Matrix {
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

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Frobenius inner product `⟨self, other⟩`.
    pub fn dot(&self, other: &Matrix) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(blocks: &[Matrix]) -> Result<Matrix> {
        let Some(first) = blocks.first() else {
            return Err(Error::DimensionMismatch("vstack of zero blocks".into()));
        };
        let cols = first.cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for b in blocks {
            if b.cols != cols {
                return Err(Error::DimensionMismatch(format!(
                    "vstack column counts {} and {}",
                    cols, b.cols
                )));
            }
            rows += b.rows;
            data.extend_from_slice(&b.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Rows `[start, start + count)` as a new matrix.
    pub fn row_block(&self, start: usize, count: usize) -> Matrix {
        Matrix {
            rows: count,
            cols: self.cols,
            data: self.data[start * self.cols..(start + count) * self.cols].to_vec(),
        }
    }

    pub fn is_symmetric(&self, rtol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        let scale = self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
        (0..self.rows).all(|i| {
            (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= rtol * scale)
        })
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Lower-triangular Cholesky factor `L` with `A = L·Lᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Cholesky {
    lower: Matrix,
}

impl Cholesky {
    pub fn factor(a: &Matrix) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(Error::DimensionMismatch(format!(
                "cholesky of non-square {}x{}",
                a.rows(),
                a.cols()
            )));
        }
        let max_diag = (0..n).fold(0.0_f64, |m, i| m.max(a[(i, i)].abs()));
        let floor = PIVOT_RTOL * max_diag;
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > floor) {
                return Err(Error::NotSpd { index: j, pivot: d });
            }
            let d = d.sqrt();
            l[(j, j)] = d;
            for i in j + 1..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / d;
            }
        }
        Ok(Self { lower: l })
    }

    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    /// Solves `A·X = B` with two triangular sweeps.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.dim();
        if b.rows() != n {
            return Err(Error::DimensionMismatch(format!(
                "solve with {n}x{n} factor and rhs {}x{}",
                b.rows(),
                b.cols()
            )));
        }
        let l = &self.lower;
        let m = b.cols();
        let mut x = b.clone();
        // forward: L·Y = B
        for i in 0..n {
            for k in 0..i {
                let lik = l[(i, k)];
                if lik == 0.0 {
                    continue;
                }
                for c in 0..m {
                    let v = x[(k, c)];
                    x[(i, c)] -= lik * v;
                }
            }
            let d = l[(i, i)];
            for c in 0..m {
                x[(i, c)] /= d;
            }
        }
        // backward: Lᵀ·X = Y
        for i in (0..n).rev() {
            for k in i + 1..n {
                let lki = l[(k, i)];
                if lki == 0.0 {
                    continue;
                }
                for c in 0..m {
                    let v = x[(k, c)];
                    x[(i, c)] -= lki * v;
                }
            }
            let d = l[(i, i)];
            for c in 0..m {
                x[(i, c)] /= d;
            }
        }
        Ok(x)
    }
}

/// Solves `A·X = B` for symmetric positive-definite `A` by Cholesky.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != a.cols() {
        return Err(Error::DimensionMismatch(format!(
            "solve_spd needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if b.rows() != a.rows() {
        return Err(Error::DimensionMismatch(format!(
            "solve_spd rhs has {} rows, matrix has {}",
            b.rows(),
            a.rows()
        )));
    }
    if !a.is_symmetric(1e-10) {
        return Err(Error::NotSpd {
            index: 0,
            pivot: f64::NAN,
        });
    }
    Cholesky::factor(a)?.solve(b)
}

/// `A + λ·I`.
pub fn ridge_of(a: &Matrix, lambda: f64) -> Result<Matrix> {
    if a.rows() != a.cols() {
        return Err(Error::DimensionMismatch(format!(
            "ridge of non-square {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("ridge must be >= 0, got {lambda}")));
    }
    let mut out = a.clone();
    for i in 0..a.rows() {
        out[(i, i)] += lambda;
    }
    Ok(out)
}

/// Central-difference gradient of a scalar function of a matrix.
pub fn finite_diff_grad<F>(f: F, x: &Matrix, h: f64) -> Result<Matrix>
where
    F: Fn(&Matrix) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be > 0, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let plus = f(&probe);
        probe.data[i] = orig - h;
        let minus = f(&probe);
        probe.data[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteFunctionValue(i));
        }
        grad.data[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Central-difference gradient over a flat parameter vector.
pub fn finite_diff_grad_vec<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let m = Matrix::new(1, x.len(), x.to_vec())?;
    Ok(finite_diff_grad(|p| f(p.as_slice()), &m, h)?.into_vec())
}

/// Norm-wise relative error `‖a − b‖ / max(‖b‖, floor)`.
pub fn relative_error(actual: &[f64], expected: &[f64]) -> f64 {
    assert_eq!(actual.len(), expected.len());
    let diff = actual
        .iter()
        .zip(expected)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let norm = expected.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}
