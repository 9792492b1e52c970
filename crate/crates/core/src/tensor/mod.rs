//! Dense linear-algebra foundation.
//!
//! Everything is carried by [`Matrix`], a row-major dense matrix of `f64`.
//! All numerics in this crate stay in 64-bit reals; quantization simulation
//! only snaps values at quantizer boundaries, so fold-equivalence checks can
//! use tight tolerances.

mod hadamard;
mod orthogonal;
mod rng;
mod svd;

pub use hadamard::{fwht_in_place, hadamard_transform, random_hadamard};
pub use orthogonal::{random_orthogonal, OrthogonalMatrix};
pub use rng::GaussianSource;
pub use svd::{svd, SvdResult};

use crate::error::{Error, Result};
use crate::par;

/// Dense row-major matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
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
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data. Fails when the length does not
    /// match or any entry is non-finite.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("matrix entries must be finite".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidInput("ragged rows".into()));
        }
        Self::from_vec(r, c, rows.concat())
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
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self * other`. Output rows are distributed across threads; each
    /// element is a plain left-to-right dot product on both paths.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::InvalidInput(format!(
                "matmul shape mismatch: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(n, m);
        let par_hint = n * k * m >= par::PAR_THRESHOLD;
        par::for_each_chunk_mut(&mut out.data, m, par_hint, |i, out_row| {
            let a_row = &self.data[i * k..(i + 1) * k];
            for (kk, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[kk * m..(kk + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        });
        Ok(out)
    }

    /// `self * other.transpose()` without materializing the transpose.
    /// This is the activation-times-weight product: both operands are read
    /// row-contiguously.
    pub fn matmul_bt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::InvalidInput(format!(
                "matmul_bt shape mismatch: {}x{} * ({}x{})^T",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (n, k, m) = (self.rows, self.cols, other.rows);
        let mut out = Matrix::zeros(n, m);
        let par_hint = n * k * m >= par::PAR_THRESHOLD;
        par::for_each_chunk_mut(&mut out.data, m, par_hint, |i, out_row| {
            let a_row = &self.data[i * k..(i + 1) * k];
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = &other.data[j * k..(j + 1) * k];
                *o = dot(a_row, b_row);
            }
        });
        Ok(out)
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::InvalidInput("add_assign shape mismatch".into()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}
