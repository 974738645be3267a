//! Small dense linear algebra in `f64`.
//!
//! Vectors are plain `Vec<f64>` / `&[f64]`; matrices are row-major [`Mat64`].
//! Every checked operation validates its dimensions and reports a mismatch as
//! [`Error::DimensionMismatch`]. QR and Cholesky are delegated to `nalgebra`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat64 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat64 {
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

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "Mat64::from_row_major",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_len("Mat64::from_rows", cols, r.len())?;
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Mat64 {
        let mut t = Mat64::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// `A v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len("Mat64::matvec", self.cols, v.len())?;
        Ok((0..self.rows).map(|i| dot_unchecked(self.row(i), v)).collect())
    }

    /// `Aᵀ v`.
    pub fn t_matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len("Mat64::t_matvec", self.rows, v.len())?;
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            axpy_unchecked(vi, self.row(i), &mut out);
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &Mat64) -> Result<Mat64> {
        check_len("Mat64::matmul", self.cols, other.rows)?;
        let mut out = Mat64::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a != 0.0 {
                    axpy_unchecked(a, other.row(k), dst);
                }
            }
        }
        Ok(out)
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Mat64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch {
                op: "Mat64::add_scaled",
                expected: self.data.len(),
                got: other.data.len(),
            });
        }
        axpy_unchecked(alpha, &other.data, &mut self.data);
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Mat64) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    fn from_nalgebra(m: &DMatrix<f64>) -> Mat64 {
        let mut out = Mat64::zeros(m.nrows(), m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out[(i, j)] = m[(i, j)];
            }
        }
        out
    }
}

impl std::ops::Index<(usize, usize)> for Mat64 {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat64 {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

fn check_len(op: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { op, expected, got });
    }
    Ok(())
}

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len("dot", a.len(), b.len())?;
    Ok(dot_unchecked(a, b))
}

/// Inner product with eight interleaved partial sums combined in a fixed
/// order, so results are deterministic. Callers must have checked lengths.
#[inline]
pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub(crate) fn axpy_unchecked(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm(v: &[f64]) -> f64 {
    dot_unchecked(v, v).sqrt()
}

pub fn norm_sq(v: &[f64]) -> f64 {
    dot_unchecked(v, v)
}

/// Orthonormal basis `Q` (same shape as `a`) for the column span of `a`,
/// via Householder QR. Columns are sign-normalised so that `R` has a
/// non-negative diagonal.
pub fn qr_orthonormalize(a: &Mat64) -> Result<Mat64> {
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyDimension("qr_orthonormalize"));
    }
    if rows < cols {
        return Err(Error::Decomposition(format!(
            "need rows >= cols for a thin QR, got {rows}x{cols}"
        )));
    }
    let qr = a.to_nalgebra().qr();
    let r = qr.r();
    let mut q = qr.q();
    let scale = (0..cols).fold(0.0_f64, |m, j| m.max(r[(j, j)].abs()));
    for j in 0..cols {
        let rjj = r[(j, j)];
        if !(rjj.abs() > 1e-10 * scale.max(f64::MIN_POSITIVE)) {
            return Err(Error::Decomposition(format!(
                "matrix is rank deficient (|R[{j},{j}]| = {:.3e})",
                rjj.abs()
            )));
        }
        if rjj < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(Mat64::from_nalgebra(&q))
}

/// Solve `A x = b` for symmetric positive definite `A` by Cholesky.
pub fn solve_spd(a: &Mat64, b: &[f64]) -> Result<Vec<f64>> {
    let (rows, cols) = a.shape();
    check_len("solve_spd (square)", rows, cols)?;
    check_len("solve_spd", rows, b.len())?;
    if rows == 0 {
        return Err(Error::EmptyDimension("solve_spd"));
    }
    let asym = a.max_abs_diff(&a.transpose());
    if asym > 1e-12 * a.max_abs().max(1.0) {
        return Err(Error::Decomposition(format!(
            "matrix is not symmetric (max asymmetry {asym:.3e})"
        )));
    }
    let chol = a
        .to_nalgebra()
        .cholesky()
        .ok_or_else(|| Error::Decomposition("matrix is not positive definite".into()))?;
    let x = chol.solve(&nalgebra::DVector::from_column_slice(b));
    Ok(x.iter().copied().collect())
}
