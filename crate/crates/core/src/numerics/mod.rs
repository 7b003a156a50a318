//! Dense row-major `f32` matrices and the products used by training and
//! low-rank factorization.
//!
//! Products accumulate in `f64` and round once when the result is stored.
//! Every output element is summed over the shared index in ascending order,
//! so repeated calls on identical inputs are bitwise identical.

mod svd;

pub use svd::{svd, truncate, FactorPair, SvdResult};

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyMatrix { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(Error::DataLength {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. All rows must have equal length.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::DataLength {
                    expected: cols,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    /// # Panics
    /// Panics if either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be non-zero");
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

    pub fn diag(values: &[f32]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    /// Always false; a matrix has at least one entry.
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                out.push(self.data[r * self.cols + c]);
            }
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise difference `self - other`.
    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "sub",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = vec![0.0f32; a.rows * b.cols];
    gemm(a.rows, a.cols, b.cols, &a.data, &b.data, &mut out);
    Ok(Matrix {
        rows: a.rows,
        cols: b.cols,
        data: out,
    })
}

/// `a · bᵀ` without the caller materializing the transpose.
pub fn matmul_a_bt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::ShapeMismatch {
            op: "matmul_a_bt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let bt = b.transpose();
    let mut out = vec![0.0f32; a.rows * b.rows];
    gemm(a.rows, a.cols, b.rows, &a.data, &bt.data, &mut out);
    Ok(Matrix {
        rows: a.rows,
        cols: b.rows,
        data: out,
    })
}

/// `aᵀ · b`.
pub fn matmul_at_b(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul_at_b",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = vec![0.0f32; a.cols * b.cols];
    gemm_at_b(a.rows, a.cols, b.cols, &a.data, &b.data, &mut out);
    Ok(Matrix {
        rows: a.cols,
        cols: b.cols,
        data: out,
    })
}

pub fn frobenius_norm(a: &Matrix) -> f32 {
    let sum: f64 = a.data.iter().map(|&v| f64::from(v) * f64::from(v)).sum();
    libm::sqrt(sum) as f32
}

/// Row-major `out (m×n) = a (m×k) · b (k×n)`.
///
/// The k loop is outermost per row so the inner loop runs over contiguous
/// columns; each output element still receives its terms in ascending k.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            let aip = f64::from(aip);
            let b_row = &b[p * n..(p + 1) * n];
            for (slot, &bv) in acc.iter_mut().zip(b_row) {
                *slot += aip * f64::from(bv);
            }
        }
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = v as f32;
        }
    }
}

/// Row-major `out (k×n) = aᵀ · b` with `a` of shape m×k and `b` of shape m×n.
pub(crate) fn gemm_at_b(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let mut acc = vec![0.0f64; k * n];
    for p in 0..m {
        let a_row = &a[p * k..(p + 1) * k];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &api) in a_row.iter().enumerate() {
            let api = f64::from(api);
            for (slot, &bv) in acc[i * n..(i + 1) * n].iter_mut().zip(b_row) {
                *slot += api * f64::from(bv);
            }
        }
    }
    for (o, v) in out.iter_mut().zip(acc) {
        *o = v as f32;
    }
}
