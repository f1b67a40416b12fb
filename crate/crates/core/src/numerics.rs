//! Dense double-precision kernels shared by every other module.
//!
//! Everything here is a pure function of its inputs. Masked logits are
//! `f64::NEG_INFINITY`; one softmax serves dense and masked attention.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Entries drawn from `N(0, std^2)`.
    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Self {
        let data = (0..rows * cols).map(|_| std * rng.gaussian()).collect();
        Self { rows, cols, data }
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

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if self.rows == 0 && self.cols == 0 {
            self.cols = row.len();
        }
        if row.len() != self.cols {
            return Err(Error::Shape(format!(
                "pushing row of length {} onto {} columns",
                row.len(),
                self.cols
            )));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Copy of columns `start..start + width`.
    pub fn col_block(&self, start: usize, width: usize) -> Matrix {
        let mut out = Matrix::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }

    /// Write `block` into columns `start..start + block.cols()`.
    pub fn set_col_block(&mut self, start: usize, block: &Matrix) {
        let w = block.cols;
        for r in 0..self.rows {
            self.row_mut(r)[start..start + w].copy_from_slice(block.row(r));
        }
    }

    /// Add `block` into columns `start..start + block.cols()`.
    pub fn add_col_block(&mut self, start: usize, block: &Matrix) {
        let w = block.cols;
        for r in 0..self.rows {
            let dst = &mut self.row_mut(r)[start..start + w];
            for (d, s) in dst.iter_mut().zip(block.row(r)) {
                *d += s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let n = other.cols;
        let mut out = Matrix::zeros(self.rows, n);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * n..(i + 1) * n];
            let mut k = 0;
            while k + 4 <= a_row.len() {
                let a = &a_row[k..k + 4];
                if a.iter().all(|&x| x != 0.0) {
                    let b = &other.data[k * n..(k + 4) * n];
                    let (b0, rest) = b.split_at(n);
                    let (b1, rest) = rest.split_at(n);
                    let (b2, b3) = rest.split_at(n);
                    for j in 0..n {
                        let mut o = o_row[j];
                        o += a[0] * b0[j];
                        o += a[1] * b1[j];
                        o += a[2] * b2[j];
                        o += a[3] * b3[j];
                        o_row[j] = o;
                    }
                } else {
                    for (kk, &x) in a.iter().enumerate() {
                        axpy_skip_zero(o_row, x, other.row(k + kk));
                    }
                }
                k += 4;
            }
            for (kk, &x) in a_row[k..].iter().enumerate() {
                axpy_skip_zero(o_row, x, other.row(k + kk));
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "matmul_t {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(self.row(i), other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "t_matmul ({}x{})ᵀ by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let a_row = self.row(r);
            let b_row = other.row(r);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "add {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
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

/// Max-subtracted softmax. `-inf` entries receive exactly zero weight.
pub fn softmax_stable(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("softmax of empty row".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::FullyMaskedRow { row: 0 });
    }
    if !max.is_finite() {
        return Err(Error::InvalidArgument("non-finite logit".into()));
    }
    let mut out: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Exact GELU, `x · Φ(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// `d/dx gelu(x) = Φ(x) + x·φ(x)`.
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    normal_cdf(x) + x * pdf
}

/// Logistic sigmoid, branch-split so `exp` never overflows.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub base: f64,
}

impl RopeConfig {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "rope head_dim must be even and positive, got {head_dim}"
            )));
        }
        if !(base > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "rope base must exceed 1, got {base}"
            )));
        }
        Ok(Self { head_dim, base })
    }

    pub fn with_default_base(head_dim: usize) -> Result<Self> {
        Self::new(head_dim, 10_000.0)
    }

    #[inline]
    fn angle(&self, pair: usize, position: usize) -> f64 {
        let inv_freq = self.base.powf(-2.0 * pair as f64 / self.head_dim as f64);
        position as f64 * inv_freq
    }
}

fn rotate(k: &[f64], position: usize, cfg: &RopeConfig, sign: f64) -> Result<Vec<f64>> {
    if !k.len().is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "rope on odd-length vector ({})",
            k.len()
        )));
    }
    if k.len() != cfg.head_dim {
        return Err(Error::Shape(format!(
            "rope vector length {} != head_dim {}",
            k.len(),
            cfg.head_dim
        )));
    }
    let mut out = vec![0.0; k.len()];
    for i in 0..k.len() / 2 {
        let (s, c) = (sign * cfg.angle(i, position)).sin_cos();
        let (x0, x1) = (k[2 * i], k[2 * i + 1]);
        out[2 * i] = x0 * c - x1 * s;
        out[2 * i + 1] = x0 * s + x1 * c;
    }
    Ok(out)
}

/// Rotary embedding: pair `(2i, 2i+1)` rotated by `position · base^(-2i/head_dim)`.
pub fn apply_rope(k: &[f64], position: usize, cfg: &RopeConfig) -> Result<Vec<f64>> {
    rotate(k, position, cfg, 1.0)
}

/// Inverse rotation; also the vector-Jacobian product of [`apply_rope`].
pub fn apply_rope_inverse(k: &[f64], position: usize, cfg: &RopeConfig) -> Result<Vec<f64>> {
    rotate(k, position, cfg, -1.0)
}

/// Row-wise rope where row `r` sits at `offset + r`.
pub fn rope_rows(m: &Matrix, offset: usize, cfg: &RopeConfig) -> Result<Matrix> {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let rotated = apply_rope(m.row(r), offset + r, cfg)?;
        out.row_mut(r).copy_from_slice(&rotated);
    }
    Ok(out)
}

/// RMS normalisation without a learned scale: `x / sqrt(mean(x²) + eps)`.
pub fn rms_norm(x: &[f64], eps: f64) -> Vec<f64> {
    let r = rms_inv(x, eps);
    x.iter().map(|v| v * r).collect()
}

#[inline]
pub fn rms_inv(x: &[f64], eps: f64) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    1.0 / (ms + eps).sqrt()
}

/// Vector-Jacobian product of [`rms_norm`] at `x`.
pub fn rms_norm_backward(x: &[f64], grad_out: &[f64], eps: f64) -> Vec<f64> {
    let r = rms_inv(x, eps);
    let n = x.len() as f64;
    let proj = dot(x, grad_out);
    let coef = r * r * r * proj / n;
    x.iter()
        .zip(grad_out)
        .map(|(xv, g)| r * g - coef * xv)
        .collect()
}

pub fn rms_norm_rows(m: &Matrix, eps: f64) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        out.row_mut(r).copy_from_slice(&rms_norm(m.row(r), eps));
    }
    out
}

/// Deterministic pseudo-random stream (ChaCha8), identical across platforms.
#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: ChaCha8Rng,
}

pub fn seeded_rng(seed: u64) -> SeededRng {
    SeededRng {
        inner: ChaCha8Rng::seed_from_u64(seed),
    }
}

impl SeededRng {
    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn gaussian(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `[lo, hi)`.
    pub fn index(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..hi)
    }

    pub fn gaussian_vec(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n).map(|_| std * self.gaussian()).collect()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(0, i + 1);
            items.swap(i, j);
        }
    }

    /// Independent child stream.
    pub fn fork(&mut self) -> SeededRng {
        seeded_rng(self.inner.random::<u64>())
    }
}

#[inline]
fn axpy_skip_zero(out: &mut [f64], a: f64, b: &[f64]) {
    if a == 0.0 {
        return;
    }
    for (o, &v) in out.iter_mut().zip(b) {
        *o += a * v;
    }
}
