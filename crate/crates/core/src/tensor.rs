// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major `f64` matrices and the handful of kernels the model needs.
//!
//! Row-level kernels ([`vecmat_into`], [`softmax_in_place`], [`layer_norm`])
//! are the same code paths the full-matrix operations use, so recomputing a
//! single row reproduces the corresponding row of a full pass bit for bit.
//! The attribution module relies on this when it recomputes only the target
//! row of a layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
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
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting bad lengths and
    /// non-finite values.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("matrix contains non-finite values".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("Matrix::from_rows", "ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn row_vector(values: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values,
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Standard matrix product `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            vecmat_into(self.row(r), other, out.row_mut(r));
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "matmul_t",
                format!("{:?} x {:?}ᵀ", self.shape(), other.shape()),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for r in 0..self.rows {
            let a = self.row(r);
            let o = out.row_mut(r);
            for (c, slot) in o.iter_mut().enumerate() {
                *slot = dot(a, other.row(c));
            }
        }
        Ok(out)
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "add_assign",
                format!("{:?} += {:?}", self.shape(), other.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out = x · b` for a row vector `x`. Overwrites `out`.
#[inline]
pub fn vecmat_into(x: &[f64], b: &Matrix, out: &mut [f64]) {
    debug_assert_eq!(x.len(), b.rows);
    debug_assert_eq!(out.len(), b.cols);
    out.fill(0.0);
    for (k, &xk) in x.iter().enumerate() {
        let brow = b.row(k);
        for (o, &bv) in out.iter_mut().zip(brow) {
            *o += xk * bv;
        }
    }
}

/// `out = x · bᵀ` for a row vector `x`. Overwrites `out`.
#[inline]
pub fn vecmat_t_into(x: &[f64], b: &Matrix, out: &mut [f64]) {
    debug_assert_eq!(x.len(), b.cols);
    debug_assert_eq!(out.len(), b.rows);
    for (r, o) in out.iter_mut().enumerate() {
        *o = dot(x, b.row(r));
    }
}

/// `acc += xᵀ · y` for row vectors (rank-one update).
#[inline]
pub fn add_outer(acc: &mut Matrix, x: &[f64], y: &[f64]) {
    debug_assert_eq!(acc.rows, x.len());
    debug_assert_eq!(acc.cols, y.len());
    for (k, &xk) in x.iter().enumerate() {
        let row = acc.row_mut(k);
        for (a, &yv) in row.iter_mut().zip(y) {
            *a += xk * yv;
        }
    }
}

/// Numerically stable softmax over `row[..limit]` restricted to the
/// positions where `allowed` is true (all positions when `None`). Entries at
/// or beyond `limit`, and disallowed entries, are set to exactly zero.
/// A row with no allowed entry becomes all zeros.
pub fn softmax_in_place(row: &mut [f64], limit: usize, allowed: Option<&[bool]>) {
    let ok = |j: usize| j < limit && allowed.is_none_or(|a| a[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if ok(j) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        row.fill(0.0);
        return;
    }
    let mut sum = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        if ok(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Row-wise softmax. With `causal_mask`, entries above the diagonal are
/// exactly zero.
pub fn softmax_rows(m: &Matrix, causal_mask: bool) -> Matrix {
    let mut out = m.clone();
    let cols = out.cols;
    for r in 0..out.rows {
        let limit = if causal_mask { (r + 1).min(cols) } else { cols };
        softmax_in_place(out.row_mut(r), limit, None);
    }
    out
}

/// Mean and reciprocal standard deviation of a vector, as used by
/// [`layer_norm`].
#[inline]
pub fn moments(x: &[f64], eps: f64) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Layer normalization of one vector, written into `out`. Returns
/// `(mean, rstd)` for use in the backward pass.
#[inline]
pub fn layer_norm_into(x: &[f64], gain: &[f64], bias: &[f64], eps: f64, out: &mut [f64]) -> (f64, f64) {
    let (mean, rstd) = moments(x, eps);
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
    }
    (mean, rstd)
}

pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.len() != gain.len() || x.len() != bias.len() {
        return Err(Error::shape(
            "layer_norm",
            format!("x {} gain {} bias {}", x.len(), gain.len(), bias.len()),
        ));
    }
    if eps <= 0.0 || x.is_empty() {
        return Err(Error::Invalid("layer_norm needs eps > 0 and a non-empty vector".into()));
    }
    let mut out = vec![0.0; x.len()];
    layer_norm_into(x, gain, bias, eps, &mut out);
    Ok(out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh approximation.
#[inline]
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `-ln softmax(logits)[gold]`.
pub fn cross_entropy(logits: &[f64], gold: usize) -> Result<f64> {
    if gold >= logits.len() {
        return Err(Error::OutOfRange(format!(
            "gold index {gold} for {} logits",
            logits.len()
        )));
    }
    Ok(log_sum_exp(logits) - logits[gold])
}

/// Cosine distance `1 − a·b / (‖a‖‖b‖)`, clamped to `[0, 2]`.
///
/// Identical inputs give exactly 0; two zero vectors give 0 and exactly one
/// zero vector gives 1.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "cosine_distance",
            format!("{} vs {}", a.len(), b.len()),
        ));
    }
    if a == b {
        return Ok(0.0);
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    match (na == 0.0, nb == 0.0) {
        (true, true) => Ok(0.0),
        (true, false) | (false, true) => Ok(1.0),
        _ => Ok((1.0 - dot(a, b) / (na * nb)).clamp(0.0, 2.0)),
    }
}
