//! Attention variants over a single head.
//!
//! Row `i` of `q` sits at absolute position `causal_offset + i` and row `j` of
//! `k`/`v` at absolute position `j`, so a query may see keys `j <= causal_offset + i`.

use crate::error::{Error, Result};
use crate::gating::Threshold;
use crate::numerics::{dot, softmax_stable, Matrix};

#[derive(Debug, Clone)]
pub struct AttnInput<'a> {
    pub q: &'a Matrix,
    pub k: &'a Matrix,
    pub v: &'a Matrix,
    pub scale: f64,
    pub causal_offset: usize,
}

impl<'a> AttnInput<'a> {
    /// Scale defaults to `1/sqrt(d)`.
    pub fn new(q: &'a Matrix, k: &'a Matrix, v: &'a Matrix, causal_offset: usize) -> Result<Self> {
        let input = Self {
            q,
            k,
            v,
            scale: 1.0 / (q.cols() as f64).sqrt(),
            causal_offset,
        };
        input.validate()?;
        Ok(input)
    }

    fn validate(&self) -> Result<()> {
        if self.k.rows() != self.v.rows() {
            return Err(Error::Shape(format!(
                "{} keys but {} values",
                self.k.rows(),
                self.v.rows()
            )));
        }
        if self.q.cols() != self.k.cols() {
            return Err(Error::Shape(format!(
                "query dim {} vs key dim {}",
                self.q.cols(),
                self.k.cols()
            )));
        }
        if self.q.rows() > 0 && self.causal_offset + self.q.rows() > self.k.rows() {
            return Err(Error::Shape(format!(
                "queries reach position {} but only {} keys",
                self.causal_offset + self.q.rows() - 1,
                self.k.rows()
            )));
        }
        Ok(())
    }

    #[inline]
    fn position(&self, row: usize) -> usize {
        self.causal_offset + row
    }
}

#[derive(Debug, Clone)]
pub struct GateVector {
    g: Vec<f64>,
}

impl GateVector {
    pub fn new(g: Vec<f64>) -> Result<Self> {
        if let Some(bad) = g.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "gate value {bad} outside [0, 1]"
            )));
        }
        Ok(Self { g })
    }

    pub fn constant(len: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; len])
    }

    pub fn values(&self) -> &[f64] {
        &self.g
    }

    pub fn len(&self) -> usize {
        self.g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g.is_empty()
    }

    /// Effective weight of key `j` for query position `i`: 1 inside the window, `g_j` outside.
    #[inline]
    pub fn effective(&self, i: usize, j: usize, window: usize) -> f64 {
        if i - j < window {
            1.0
        } else {
            self.g[j]
        }
    }
}

/// Vertical-slash prefill mask: `M(i, j) = (i - j < window) || admitted[j]`, for `j <= i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VsMask {
    pub window: usize,
    pub admitted: Vec<bool>,
}

impl VsMask {
    pub fn new(window: usize, admitted: Vec<bool>) -> Result<Self> {
        if window == 0 {
            return Err(Error::InvalidArgument("window must be at least 1".into()));
        }
        Ok(Self { window, admitted })
    }

    #[inline]
    pub fn permits(&self, i: usize, j: usize) -> bool {
        j <= i && (i - j < self.window || self.admitted[j])
    }

    /// Permitted keys for query position `i`.
    pub fn row_count(&self, i: usize) -> usize {
        (0..=i).filter(|&j| self.permits(i, j)).count()
    }
}

pub fn build_vs_mask(gates: &GateVector, threshold: Threshold, window: usize) -> Result<VsMask> {
    VsMask::new(
        window,
        gates
            .values()
            .iter()
            .map(|&g| threshold.admits(g))
            .collect(),
    )
}

/// Number of `(q, k)` score evaluations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub score_evals: u64,
}

impl OpCounter {
    pub fn add(&mut self, n: u64) {
        self.score_evals += n;
    }

    pub fn merge(&mut self, other: OpCounter) {
        self.score_evals += other.score_evals;
    }
}

/// Shared kernel: row-wise softmax over scores of permitted keys plus an optional bias.
fn attend_rows<F>(
    input: &AttnInput<'_>,
    counter: &mut OpCounter,
    mut logit_bias: F,
) -> Result<Matrix>
where
    F: FnMut(usize, usize) -> Option<f64>,
{
    input.validate()?;
    let d = input.v.cols();
    let mut out = Matrix::zeros(input.q.rows(), d);
    let mut idx = Vec::new();
    let mut logits = Vec::new();
    for r in 0..input.q.rows() {
        let i = input.position(r);
        idx.clear();
        logits.clear();
        let q = input.q.row(r);
        for j in 0..=i {
            if let Some(bias) = logit_bias(i, j) {
                idx.push(j);
                logits.push(dot(q, input.k.row(j)) * input.scale + bias);
            }
        }
        counter.add(idx.len() as u64);
        if idx.is_empty() {
            return Err(Error::FullyMaskedRow { row: r });
        }
        let p = softmax_stable(&logits).map_err(|e| match e {
            Error::FullyMaskedRow { .. } => Error::FullyMaskedRow { row: r },
            other => other,
        })?;
        let o = out.row_mut(r);
        for (&j, &w) in idx.iter().zip(&p) {
            for (ov, vv) in o.iter_mut().zip(input.v.row(j)) {
                *ov += w * vv;
            }
        }
    }
    Ok(out)
}

/// Standard causal softmax attention.
pub fn attn_dense(input: &AttnInput<'_>, counter: &mut OpCounter) -> Result<Matrix> {
    attend_rows(input, counter, |_, _| Some(0.0))
}

/// Dense attention with forbidden pairs forced to `-inf` logits.
///
/// Every causal score is evaluated; this is the reference route that sparse
/// kernels are checked against.
pub fn attn_dense_masked<M>(input: &AttnInput<'_>, mut allowed: M) -> Result<Matrix>
where
    M: FnMut(usize, usize) -> bool,
{
    input.validate()?;
    let d = input.v.cols();
    let mut out = Matrix::zeros(input.q.rows(), d);
    for r in 0..input.q.rows() {
        let i = input.position(r);
        let logits: Vec<f64> = (0..=i)
            .map(|j| {
                let s = dot(input.q.row(r), input.k.row(j)) * input.scale;
                if allowed(i, j) {
                    s
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let p = softmax_stable(&logits).map_err(|e| match e {
            Error::FullyMaskedRow { .. } => Error::FullyMaskedRow { row: r },
            other => other,
        })?;
        let o = out.row_mut(r);
        for (j, &w) in p.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (ov, vv) in o.iter_mut().zip(input.v.row(j)) {
                *ov += w * vv;
            }
        }
    }
    Ok(out)
}

fn check_gates(input: &AttnInput<'_>, gates: &GateVector, window: usize) -> Result<()> {
    if gates.len() != input.k.rows() {
        return Err(Error::Shape(format!(
            "{} gates for {} keys",
            gates.len(),
            input.k.rows()
        )));
    }
    if window == 0 {
        return Err(Error::InvalidArgument("window must be at least 1".into()));
    }
    Ok(())
}

/// Multiplicative write-gated attention: weight(i, j) ∝ exp(q_i·k_j·scale) · g̃_ij.
pub fn attn_write_gated_mul(
    input: &AttnInput<'_>,
    gates: &GateVector,
    window: usize,
    counter: &mut OpCounter,
) -> Result<Matrix> {
    check_gates(input, gates, window)?;
    input.validate()?;
    let d = input.v.cols();
    let mut out = Matrix::zeros(input.q.rows(), d);
    for r in 0..input.q.rows() {
        let i = input.position(r);
        let q = input.q.row(r);
        let scores: Vec<f64> = (0..=i)
            .map(|j| dot(q, input.k.row(j)) * input.scale)
            .collect();
        counter.add(scores.len() as u64);
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scores
            .iter()
            .enumerate()
            .map(|(j, s)| (s - max).exp() * gates.effective(i, j, window))
            .collect();
        let norm: f64 = weights.iter().sum();
        if norm <= 0.0 {
            return Err(Error::FullySuppressedRow { row: r });
        }
        let o = out.row_mut(r);
        for (j, w) in weights.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            let p = w / norm;
            for (ov, vv) in o.iter_mut().zip(input.v.row(j)) {
                *ov += p * vv;
            }
        }
    }
    Ok(out)
}

/// Log-space form: softmax(q_i·k_j·scale + log(g̃_ij + epsilon)).
pub fn attn_write_gated_logbias(
    input: &AttnInput<'_>,
    gates: &GateVector,
    window: usize,
    epsilon: f64,
    counter: &mut OpCounter,
) -> Result<Matrix> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    check_gates(input, gates, window)?;
    attend_rows(input, counter, |i, j| {
        Some((gates.effective(i, j, window) + epsilon).ln())
    })
}

/// Attention restricted to the vertical-slash mask; only permitted pairs are scored.
pub fn attn_vertical_slash(
    input: &AttnInput<'_>,
    mask: &VsMask,
    counter: &mut OpCounter,
) -> Result<Matrix> {
    if mask.admitted.len() != input.k.rows() {
        return Err(Error::Shape(format!(
            "mask covers {} keys, input has {}",
            mask.admitted.len(),
            input.k.rows()
        )));
    }
    let window = mask.window;
    attend_rows(input, counter, |i, j| {
        (i - j < window || mask.admitted[j]).then_some(0.0)
    })
}

/// Key/value rows for one head, in logical order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvSlice {
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub positions: Vec<usize>,
}

impl KvSlice {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn push(&mut self, k: Vec<f64>, v: Vec<f64>, position: usize) {
        self.keys.push(k);
        self.values.push(v);
        self.positions.push(position);
    }
}

/// Single-query decode attention over `global ‖ local`; visibility is binary.
pub fn attn_ragged(
    q: &[f64],
    local: &KvSlice,
    global: &KvSlice,
    counter: &mut OpCounter,
) -> Result<Vec<f64>> {
    if local.is_empty() && global.is_empty() {
        return Err(Error::FullyMaskedRow { row: 0 });
    }
    let scale = 1.0 / (q.len() as f64).sqrt();
    let keys = global.keys.iter().chain(&local.keys);
    let mut logits = Vec::with_capacity(global.len() + local.len());
    for k in keys {
        if k.len() != q.len() {
            return Err(Error::Shape(format!(
                "key dim {} vs query dim {}",
                k.len(),
                q.len()
            )));
        }
        logits.push(dot(q, k) * scale);
    }
    counter.add(logits.len() as u64);
    let p = softmax_stable(&logits)?;
    let d = global
        .values
        .first()
        .or(local.values.first())
        .map_or(0, Vec::len);
    let mut out = vec![0.0; d];
    for (w, v) in p.iter().zip(global.values.iter().chain(&local.values)) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    Ok(out)
}
