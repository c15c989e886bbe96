//! Dense f64 linear algebra and scalar primitives.
//!
//! Everything here is deliberately plain: row-major storage, fixed loop
//! order in every reduction, no parallelism. Identical inputs produce
//! bit-identical outputs across runs, which the training pipeline and the
//! regression tests rely on.

use crate::error::{EkdError, Result};

/// Row-major dense matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix data length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
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

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
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

    /// Gather a subset of rows into a new matrix, in the given order.
    pub fn gather_rows(&self, indices: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(indices.len(), self.cols);
        for (k, &i) in indices.iter().enumerate() {
            out.row_mut(k).copy_from_slice(self.row(i));
        }
        out
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

    /// Matrix product. Accumulation order over the inner dimension is fixed
    /// (k ascending), so results are reproducible bit for bit.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul dimension mismatch: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for j in 0..other.cols {
                    orow[j] += a * brow[j];
                }
            }
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// L2-normalize every row. Returns the normalized matrix and the original
/// row norms (needed to backpropagate through the normalization).
///
/// Errors with [`EkdError::DegenerateEmbedding`] if any row norm is below
/// 1e-12.
pub fn row_l2_normalize(m: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let row = out.row_mut(i);
        let mut sq = 0.0;
        for v in row.iter() {
            sq += v * v;
        }
        let norm = sq.sqrt();
        if norm < 1e-12 {
            return Err(EkdError::DegenerateEmbedding { row: i, norm });
        }
        let inv = 1.0 / norm;
        for v in row.iter_mut() {
            *v *= inv;
        }
        norms.push(norm);
    }
    Ok((out, norms))
}

/// Vector-Jacobian product of row-wise L2 normalization.
///
/// Given the normalized rows, their pre-normalization norms, and a cotangent
/// on the normalized output, returns the cotangent on the un-normalized
/// input: `(g - (g . u) u) / norm` per row, where `u` is the unit row.
pub fn row_l2_normalize_vjp(normalized: &Matrix, norms: &[f64], grad_out: &Matrix) -> Matrix {
    assert_eq!(normalized.rows(), grad_out.rows());
    assert_eq!(normalized.cols(), grad_out.cols());
    assert_eq!(normalized.rows(), norms.len());
    let mut out = Matrix::zeros(normalized.rows(), normalized.cols());
    for i in 0..normalized.rows() {
        let u = normalized.row(i);
        let g = grad_out.row(i);
        let mut dot = 0.0;
        for (gv, uv) in g.iter().zip(u.iter()) {
            dot += gv * uv;
        }
        let inv = 1.0 / norms[i];
        let orow = out.row_mut(i);
        for j in 0..u.len() {
            orow[j] = (g[j] - dot * u[j]) * inv;
        }
    }
    out
}

/// Numerically stable logistic sigmoid, safe for arguments with magnitude
/// up to at least 1e6.
#[inline]
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Threshold such that at most `values.len() * top_fraction` entries are
/// strictly greater than it, and that count is the largest achievable by
/// picking the threshold from the sample itself.
///
/// The returned value is the element at ascending-sorted index
/// `ceil(M * (1 - top_fraction)) - 1`, clamped into `[0, M-1]`.
pub fn sorted_quantile_threshold(values: &[f64], top_fraction: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(EkdError::EmptyInput("quantile threshold of empty sample"));
    }
    assert!(
        top_fraction > 0.0 && top_fraction <= 1.0,
        "top_fraction must be in (0, 1], got {top_fraction}"
    );
    let m = values.len();
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let raw = (m as f64 * (1.0 - top_fraction)).ceil() as isize - 1;
    let idx = raw.clamp(0, m as isize - 1) as usize;
    Ok(sorted[idx])
}

/// Same convention as [`sorted_quantile_threshold`] but for input that is
/// already ascending-sorted; avoids re-sorting in per-batch hot paths.
pub fn quantile_from_sorted(sorted: &[f64], top_fraction: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(EkdError::EmptyInput("quantile threshold of empty sample"));
    }
    let m = sorted.len();
    let raw = (m as f64 * (1.0 - top_fraction)).ceil() as isize - 1;
    let idx = raw.clamp(0, m as isize - 1) as usize;
    Ok(sorted[idx])
}
