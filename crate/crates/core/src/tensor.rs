//! Dense row-major `f64` matrices and the handful of kernels the decoder,
//! the proxy gradient and the selector need.
//!
//! Every product accumulates left to right over the inner dimension, so
//! results are bit-reproducible across runs and threads. Products also feed a
//! thread-local multiply-accumulate counter (see [`mac_counter`]) used to
//! check the analytical cost model against an actual forward pass.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Thread-local multiply-accumulate counter fed by every matrix product.
pub mod mac_counter {
    use std::cell::Cell;

    thread_local! {
        static MACS: Cell<u64> = const { Cell::new(0) };
    }

    pub(crate) fn add(n: u64) {
        MACS.with(|c| c.set(c.get() + n));
    }

    pub fn reset() {
        MACS.with(|c| c.set(0));
    }

    pub fn read() -> u64 {
        MACS.with(Cell::get)
    }

    /// Runs `f` and returns its result with the number of MACs it performed.
    pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
        let before = read();
        let out = f();
        (out, read() - before)
    }
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        if self.rows > 8 {
            writeln!(f, "  ... {} more rows", self.rows - 8)?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::input(format!(
                "{what} has a non-finite entry at ({}, {})",
                i / self.cols.max(1),
                i % self.cols.max(1)
            ))),
        }
    }

    /// Copies the listed rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &r in idx {
            data.extend_from_slice(self.row(r));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Copies columns `start..end`.
    pub fn col_block(&self, start: usize, end: usize) -> Matrix {
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Matrix {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    /// Writes `block` into columns starting at `start`.
    pub fn set_col_block(&mut self, start: usize, block: &Matrix) {
        debug_assert_eq!(block.rows, self.rows);
        for r in 0..self.rows {
            let cols = self.cols;
            self.data[r * cols + start..r * cols + start + block.cols].copy_from_slice(block.row(r));
        }
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "cannot add {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
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

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let acc = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let s = a.data[i * k + p];
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, bv) in acc.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
    mac_counter::add((n * k * m) as u64);
    Ok(Matrix {
        rows: n,
        cols: m,
        data: out,
    })
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape(format!(
            "matmul_nt {}x{} by ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Vec::with_capacity(a.rows * b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.push(dot(ar, b.row(j)));
        }
    }
    mac_counter::add((a.rows * a.cols * b.rows) as u64);
    Ok(Matrix {
        rows: a.rows,
        cols: b.rows,
        data: out,
    })
}

/// `aᵀ · b`.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::shape(format!(
            "matmul_tn ({}x{})ᵀ by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (n, k, m) = (a.cols, a.rows, b.cols);
    let mut out = vec![0.0; n * m];
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, &s) in arow.iter().enumerate() {
            let acc = &mut out[i * m..(i + 1) * m];
            for (o, bv) in acc.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
    mac_counter::add((n * k * m) as u64);
    Ok(Matrix {
        rows: n,
        cols: m,
        data: out,
    })
}

/// Left-to-right dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Numerically stable softmax of one slice, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
}

impl NormKind {
    pub fn code(self) -> u8 {
        match self {
            NormKind::LayerNorm => 0,
            NormKind::RmsNorm => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(NormKind::LayerNorm),
            1 => Some(NormKind::RmsNorm),
            _ => None,
        }
    }
}

/// Per-row statistics kept by [`norm_rows_with_stats`] for the backward pass:
/// the normalized row (before the affine map) and `1/σ`.
#[derive(Clone, Debug)]
pub struct NormCache {
    pub kind: NormKind,
    pub normalized: Matrix,
    pub inv_std: Vec<f64>,
}

pub fn norm_rows(m: &Matrix, kind: NormKind, gain: &[f64], bias: Option<&[f64]>, eps: f64) -> Result<Matrix> {
    norm_rows_with_stats(m, kind, gain, bias, eps).map(|(out, _)| out)
}

pub fn norm_rows_with_stats(
    m: &Matrix,
    kind: NormKind,
    gain: &[f64],
    bias: Option<&[f64]>,
    eps: f64,
) -> Result<(Matrix, NormCache)> {
    let d = m.cols;
    if gain.len() != d || bias.is_some_and(|b| b.len() != d) {
        return Err(Error::shape(format!("norm parameters do not match width {d}")));
    }
    let mut normalized = Matrix::zeros(m.rows, d);
    let mut out = Matrix::zeros(m.rows, d);
    let mut inv_std = Vec::with_capacity(m.rows);
    for r in 0..m.rows {
        let x = m.row(r);
        let (mean, second) = match kind {
            NormKind::LayerNorm => {
                let mean = x.iter().sum::<f64>() / d as f64;
                let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                (mean, var)
            }
            NormKind::RmsNorm => (0.0, x.iter().map(|v| v * v).sum::<f64>() / d as f64),
        };
        let inv = 1.0 / (second + eps).sqrt();
        inv_std.push(inv);
        let nrow = normalized.row_mut(r);
        for (n, v) in nrow.iter_mut().zip(x) {
            *n = (v - mean) * inv;
        }
        let orow = &mut out.data[r * d..(r + 1) * d];
        for c in 0..d {
            orow[c] = normalized.data[r * d + c] * gain[c] + bias.map_or(0.0, |b| b[c]);
        }
    }
    Ok((
        out,
        NormCache {
            kind,
            normalized,
            inv_std,
        },
    ))
}

/// Backward pass of [`norm_rows_with_stats`] with respect to its input rows.
/// Gain and bias gradients are accumulated into `dgain`/`dbias` when given.
pub fn norm_rows_backward(
    cache: &NormCache,
    gain: &[f64],
    dout: &Matrix,
    mut dgain: Option<&mut [f64]>,
    mut dbias: Option<&mut [f64]>,
) -> Matrix {
    let d = dout.cols;
    let mut dx = Matrix::zeros(dout.rows, d);
    let mut dxhat = vec![0.0; d];
    for r in 0..dout.rows {
        let dy = dout.row(r);
        let xhat = cache.normalized.row(r);
        for c in 0..d {
            dxhat[c] = dy[c] * gain[c];
        }
        if let Some(g) = dgain.as_deref_mut() {
            for c in 0..d {
                g[c] += dy[c] * xhat[c];
            }
        }
        if let Some(b) = dbias.as_deref_mut() {
            for c in 0..d {
                b[c] += dy[c];
            }
        }
        let mean_dxhat = match cache.kind {
            NormKind::LayerNorm => dxhat.iter().sum::<f64>() / d as f64,
            NormKind::RmsNorm => 0.0,
        };
        let mean_proj = dot(&dxhat, xhat) / d as f64;
        let inv = cache.inv_std[r];
        let out = dx.row_mut(r);
        for c in 0..d {
            out[c] = inv * (dxhat[c] - mean_dxhat - xhat[c] * mean_proj);
        }
    }
    dx
}

pub fn l2_norm_rows(m: &Matrix) -> Vec<f64> {
    (0..m.rows).map(|r| dot(m.row(r), m.row(r)).sqrt()).collect()
}

/// Indices ordering `scores` from largest to smallest; equal scores keep
/// ascending index order.
pub fn argsort_desc(scores: &[f64]) -> Result<Vec<usize>> {
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::input(format!("score {i} is NaN")));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    Ok(idx)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some(b) if values[b] >= v => {}
            _ if v.is_nan() => {}
            _ => best = Some(i),
        }
    }
    best
}
