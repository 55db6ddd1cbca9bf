//! Dense matrix primitives used by every merge path.
//!
//! All merge math runs in `f64` regardless of how a checkpoint stores its
//! weights. Matrices are row-major; conversion to `nalgebra` happens only at
//! the decomposition boundary.

mod svd;

pub use svd::{svd, SvdResult, SIGMA_CLAMP_RELATIVE};

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("shape {rows}x{cols} does not match data length {len}")]
    InvalidShape { rows: usize, cols: usize, len: usize },
    #[error("non-finite value {value} at ({row}, {col})")]
    NonFinite { row: usize, col: usize, value: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("rank limit {requested} exceeds min(rows, cols) = {max}")]
    RankTooLarge { requested: usize, max: usize },
    #[error("weight {value} at index {index} is outside [0, 1]")]
    WeightOutOfRange { index: usize, value: f64 },
    #[error("SVD failed to converge on a {rows}x{cols} matrix")]
    NoConvergence { rows: usize, cols: usize },
}

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if rows * cols != data.len() {
            return Err(LinalgError::InvalidShape {
                rows,
                cols,
                len: data.len(),
            });
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

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// First non-finite entry, if any.
    pub fn check_finite(&self) -> Result<(), LinalgError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(LinalgError::NonFinite {
                row: i / self.cols.max(1),
                col: i % self.cols.max(1),
                value: self.data[i],
            }),
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix, LinalgError> {
        if self.cols != rhs.rows {
            return Err(LinalgError::DimensionMismatch {
                expected: self.cols,
                got: rhs.rows,
            });
        }
        Ok(Matrix::from_nalgebra(&(self.to_nalgebra() * rhs.to_nalgebra())))
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix, LinalgError> {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix, LinalgError> {
        self.zip_with(rhs, |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(
        &self,
        rhs: &Matrix,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix, LinalgError> {
        if self.shape() != rhs.shape() {
            return Err(LinalgError::DimensionMismatch {
                expected: self.data.len(),
                got: rhs.data.len(),
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest absolute elementwise difference. Panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub(crate) fn from_nalgebra(m: &DMatrix<f64>) -> Matrix {
        let (rows, cols) = m.shape();
        Matrix::from_fn(rows, cols, |r, c| m[(r, c)])
    }
}

/// Sum of singular values.
pub fn nuclear_norm(sigma: &[f64]) -> f64 {
    sigma.iter().sum()
}

/// Largest singular value; 0 for an empty or zero matrix.
pub fn spectral_norm(a: &Matrix) -> Result<f64, LinalgError> {
    a.check_finite()?;
    if a.rows() == 0 || a.cols() == 0 {
        return Ok(0.0);
    }
    let sv = a.to_nalgebra().singular_values();
    Ok(sv.iter().copied().fold(0.0, f64::max))
}

/// `P = V · diag(γ)² · Vᵀ`, where the rows of `vt` are the right-singular
/// vectors. Returns a `cols × cols` symmetric PSD matrix.
pub fn weighted_right_projector(vt: &Matrix, gamma: &[f64]) -> Result<Matrix, LinalgError> {
    weighted_right_projector_pow(vt, gamma, 2)
}

/// Same as [`weighted_right_projector`] with a configurable exponent on `γ`.
pub fn weighted_right_projector_pow(
    vt: &Matrix,
    gamma: &[f64],
    exponent: u32,
) -> Result<Matrix, LinalgError> {
    check_weights(vt, gamma)?;
    let n = vt.cols();
    let k = vt.rows();
    let weights: Vec<f64> = gamma.iter().map(|g| g.powi(exponent as i32)).collect();
    let mut p = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for (t, w) in weights.iter().enumerate().take(k) {
                acc += w * vt.get(t, i) * vt.get(t, j);
            }
            p.set(i, j, acc);
            p.set(j, i, acc);
        }
    }
    Ok(p)
}

/// Computes `A · V · diag(γ^exponent) · Vᵀ` without materializing the
/// `cols × cols` projector.
pub fn project_onto_right_subspace(
    a: &Matrix,
    vt: &Matrix,
    gamma: &[f64],
    exponent: u32,
) -> Result<Matrix, LinalgError> {
    check_weights(vt, gamma)?;
    if a.cols() != vt.cols() {
        return Err(LinalgError::DimensionMismatch {
            expected: vt.cols(),
            got: a.cols(),
        });
    }
    let vt_na = vt.to_nalgebra();
    let mut coeffs = a.to_nalgebra() * vt_na.transpose();
    for (t, g) in gamma.iter().enumerate() {
        let w = g.powi(exponent as i32);
        coeffs.column_mut(t).scale_mut(w);
    }
    Ok(Matrix::from_nalgebra(&(coeffs * vt_na)))
}

fn check_weights(vt: &Matrix, gamma: &[f64]) -> Result<(), LinalgError> {
    if gamma.len() != vt.rows() {
        return Err(LinalgError::DimensionMismatch {
            expected: vt.rows(),
            got: gamma.len(),
        });
    }
    if let Some((index, &value)) = gamma
        .iter()
        .enumerate()
        .find(|(_, g)| !(0.0..=1.0).contains(*g))
    {
        return Err(LinalgError::WeightOutOfRange { index, value });
    }
    Ok(())
}
