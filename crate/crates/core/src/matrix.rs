//! Dense row-major matrices.
//!
//! Storage is `f32` everywhere, matching the embedding file format. Every
//! reduction (dot products, norms, sums) accumulates in `f64`. Inside the
//! crate, gradient code works on [`Mat64`] so the backward pass stays
//! accurate enough to check against finite differences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Guard used by row normalization: rows are divided by `max(norm, NORM_EPS)`.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "Matrix::new",
                left: format!("{rows}x{cols}"),
                right: format!("len {}", data.len()),
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

    /// Builds a matrix from equally sized rows. An empty slice gives `0 x 0`.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("Matrix::from_rows", (rows.len(), cols), (1, r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
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
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f32) {
        self.data[i * self.cols + j] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// New matrix made of the given rows, in the given order.
    pub fn gather_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols && self.rows > 0 && other.rows > 0 {
            return Err(Error::shape("vstack", self.shape(), other.shape()));
        }
        let cols = if self.rows > 0 { self.cols } else { other.cols };
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols,
            data,
        })
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }
}

#[inline]
pub(crate) fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

#[inline]
pub(crate) fn norm_f64(a: &[f32]) -> f64 {
    dot_f64(a, a).sqrt()
}

/// Matrix product with `f64` accumulation.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (n, m, p) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0f32; n * p];
    let mut acc = vec![0.0f64; p];
    for i in 0..n {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = a.row(i);
        for (k, &aik) in arow.iter().enumerate().take(m) {
            if aik == 0.0 {
                continue;
            }
            let aik = aik as f64;
            for (acc_j, &bkj) in acc.iter_mut().zip(b.row(k)) {
                *acc_j += aik * bkj as f64;
            }
        }
        for (o, &v) in out[i * p..(i + 1) * p].iter_mut().zip(&acc) {
            *o = v as f32;
        }
    }
    Ok(Matrix {
        rows: n,
        cols: p,
        data: out,
    })
}

/// Divides each row by `max(norm, NORM_EPS)`; zero rows stay zero.
pub fn l2_normalize_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let scale = 1.0 / norm_f64(row).max(NORM_EPS);
        for v in row.iter_mut() {
            *v = (*v as f64 * scale) as f32;
        }
    }
    out
}

/// `S[i][j] = cos(u_i, v_j)`. Zero rows give zero similarity.
pub fn cosine_similarity_matrix(u: &Matrix, v: &Matrix) -> Result<Matrix> {
    if u.cols != v.cols {
        return Err(Error::shape("cosine_similarity_matrix", u.shape(), v.shape()));
    }
    let un: Vec<f64> = (0..u.rows).map(|i| norm_f64(u.row(i)).max(NORM_EPS)).collect();
    let vn: Vec<f64> = (0..v.rows).map(|j| norm_f64(v.row(j)).max(NORM_EPS)).collect();
    Ok(Matrix::from_fn(u.rows, v.rows, |i, j| {
        (dot_f64(u.row(i), v.row(j)) / (un[i] * vn[j])) as f32
    }))
}

/// Mean cross-entropy of each row against its diagonal target, and the
/// gradient with respect to the logits.
pub fn softmax_cross_entropy_rows(logits: &Matrix) -> Result<(f64, Matrix)> {
    if logits.rows != logits.cols || logits.rows == 0 {
        return Err(Error::shape(
            "softmax_cross_entropy_rows",
            logits.shape(),
            (logits.rows, logits.rows),
        ));
    }
    let (loss, grad) = Mat64::from_f32(logits).cross_entropy_diag();
    Ok((loss, grad.to_f32()))
}

/// Row-wise softmax in `f64`, stabilised by subtracting the row max.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let m = Mat64::from_f32(logits);
    let mut out = Matrix::zeros(m.rows, m.cols);
    for i in 0..m.rows {
        let row = m.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (o, e) in out.row_mut(i).iter_mut().zip(exps) {
            *o = (e / z) as f32;
        }
    }
    out
}

/// `f64` working matrix for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Mat64 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat64 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_f32(m: &Matrix) -> Self {
        Self {
            rows: m.rows,
            cols: m.cols,
            data: m.data.iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn to_f32(&self) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// `self * other`
    pub fn matmul(&self, other: &Mat64) -> Mat64 {
        debug_assert_eq!(self.cols, other.rows);
        let mut out = Mat64::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in orow.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * other^T`
    pub fn matmul_t(&self, other: &Mat64) -> Mat64 {
        debug_assert_eq!(self.cols, other.cols);
        let mut out = Mat64::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = a.iter().zip(other.row(j)).map(|(x, y)| x * y).sum();
            }
        }
        out
    }

    /// `self^T * other`
    pub fn t_matmul(&self, other: &Mat64) -> Mat64 {
        debug_assert_eq!(self.rows, other.rows);
        let mut out = Mat64::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let b = other.row(r);
            for (i, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &bv) in out.data[i * other.cols..(i + 1) * other.cols].iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat64 {
        let mut out = Mat64::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.get(i, j);
            }
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// Row-normalises in place and returns the clamped norms.
    pub fn normalize_rows(&mut self) -> Vec<f64> {
        let mut norms = Vec::with_capacity(self.rows);
        for i in 0..self.rows {
            let row = self.row_mut(i);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        norms
    }

    /// Mean over rows of `-log softmax(row)[i]` and its gradient.
    pub fn cross_entropy_diag(&self) -> (f64, Mat64) {
        debug_assert_eq!(self.rows, self.cols);
        let n = self.rows;
        let mut grad = Mat64::zeros(n, n);
        let mut loss = 0.0;
        for i in 0..n {
            let row = self.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            loss += log_z - row[i];
            for (g, &v) in grad.row_mut(i).iter_mut().zip(row) {
                *g = (v - log_z).exp() / n as f64;
            }
            grad.data[i * n + i] -= 1.0 / n as f64;
        }
        (loss / n as f64, grad)
    }
}
