//! Frozen toy transformer shared by teacher, student, engine and oracles.
//!
//! Pre-norm blocks with weightless RMS norm, rotary attention and a GELU MLP.
//! The attention itself is supplied by the caller, so the same weights can be
//! driven by dense, masked, gated or cache-backed attention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gelu, rms_norm_rows, rope_rows, seeded_rng, Matrix, RopeConfig, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
    pub vocab: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            kv_heads: 4,
            head_dim: 16,
            mlp_hidden: 128,
            vocab: 64,
            rope_base: 10_000.0,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn kv_dim(&self) -> usize {
        self.kv_heads * self.head_dim
    }

    /// Query heads per kv head.
    pub fn group_size(&self) -> usize {
        self.heads / self.kv_heads
    }

    pub fn kv_head_of(&self, query_head: usize) -> usize {
        query_head / self.group_size()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0
            || self.heads == 0
            || self.kv_heads == 0
            || self.vocab == 0
            || self.mlp_hidden == 0
        {
            return Err(Error::InvalidArgument(format!(
                "degenerate model config {self:?}"
            )));
        }
        if !self.heads.is_multiple_of(self.kv_heads) {
            return Err(Error::InvalidArgument(format!(
                "{} query heads not divisible by {} kv heads",
                self.heads, self.kv_heads
            )));
        }
        RopeConfig::new(self.head_dim, self.rope_base)?;
        Ok(())
    }
}

/// Extra structure planted into random weights: selected "anchor" tokens
/// receive a key component that every query attends to, making them the
/// long-range tokens worth keeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalPlant {
    pub anchor_ids: Vec<u32>,
    /// Coupling of the shared query direction to the anchor key direction.
    pub strength: f64,
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    cfg: ModelConfig,
    rope: RopeConfig,
    embed: Matrix,
    layers: Vec<LayerWeights>,
    w_out: Matrix,
}

/// Per-layer projections of a block of rows.
#[derive(Debug, Clone)]
pub struct LayerQkv {
    /// Position of row 0.
    pub offset: usize,
    /// Normalised layer input.
    pub normed: Matrix,
    /// Rotated queries, one matrix per query head.
    pub q_rope: Vec<Matrix>,
    /// Un-rotated queries, one per query head.
    pub q_pre: Vec<Matrix>,
    /// Keys before rotation, one per kv head.
    pub k_pre: Vec<Matrix>,
    /// Keys after rotation, one per kv head.
    pub k_rope: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Final normalised hidden states (inputs of the output projection).
    pub hidden: Matrix,
    pub logits: Matrix,
}

impl ToyModel {
    pub fn random(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded_rng(seed);
        let dm = cfg.model_dim();
        let kv = cfg.kv_dim();
        let f = cfg.mlp_hidden;
        let embed = Matrix::gaussian(cfg.vocab, dm, 1.0, &mut rng);
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let layers = (0..cfg.layers)
            .map(|_| LayerWeights {
                wq: Matrix::gaussian(dm, dm, inv(dm), &mut rng),
                wk: Matrix::gaussian(dm, kv, inv(dm), &mut rng),
                wv: Matrix::gaussian(dm, kv, inv(dm), &mut rng),
                wo: Matrix::gaussian(dm, dm, inv(dm), &mut rng),
                w1: Matrix::gaussian(dm, f, inv(dm), &mut rng),
                b1: rng.gaussian_vec(f, 0.1),
                w2: Matrix::gaussian(f, dm, inv(f), &mut rng),
                b2: rng.gaussian_vec(dm, 0.1),
            })
            .collect();
        let w_out = Matrix::gaussian(dm, cfg.vocab, inv(dm), &mut rng);
        Ok(Self {
            cfg,
            rope: RopeConfig::new(cfg.head_dim, cfg.rope_base)?,
            embed,
            layers,
            w_out,
        })
    }

    /// Random weights plus a planted retrieval pattern around `plant.anchor_ids`.
    ///
    /// Every embedding gains a shared direction `b`; anchor embeddings gain a
    /// marker direction `a`. In every layer, each query head reads `b` and each
    /// kv head reads `a` into the lowest-frequency rotary pair, so anchor keys
    /// score highly against every query regardless of distance.
    pub fn with_retrieval_plant(
        cfg: ModelConfig,
        seed: u64,
        plant: &RetrievalPlant,
    ) -> Result<Self> {
        let mut model = Self::random(cfg, seed)?;
        if plant.strength == 0.0 {
            return Ok(model);
        }
        let mut rng = seeded_rng(seed ^ 0x9e37_79b9_7f4a_7c15);
        let dm = cfg.model_dim();
        let shared = unit_vector(&mut rng, dm);
        let marker = orthogonal_unit(&mut rng, &shared);
        let root = (dm as f64).sqrt();
        for t in 0..cfg.vocab {
            let row = model.embed.row_mut(t);
            for (x, s) in row.iter_mut().zip(&shared) {
                *x += root * s;
            }
        }
        for &id in &plant.anchor_ids {
            let id = id as usize;
            if id >= cfg.vocab {
                return Err(Error::UnknownToken {
                    id: id as u32,
                    vocab: cfg.vocab,
                });
            }
            let row = model.embed.row_mut(id);
            for (x, m) in row.iter_mut().zip(&marker) {
                *x += 1.5 * root * m;
            }
        }
        let slot = cfg.head_dim - 2;
        for layer in &mut model.layers {
            for h in 0..cfg.heads {
                let col = h * cfg.head_dim + slot;
                for r in 0..dm {
                    let v = layer.wq.get(r, col) + plant.strength * shared[r];
                    layer.wq.set(r, col, v);
                }
            }
            for h in 0..cfg.kv_heads {
                let col = h * cfg.head_dim + slot;
                for r in 0..dm {
                    let v = layer.wk.get(r, col) + plant.strength * marker[r];
                    layer.wk.set(r, col, v);
                }
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn rope(&self) -> &RopeConfig {
        &self.rope
    }

    pub fn layer(&self, l: usize) -> &LayerWeights {
        &self.layers[l]
    }

    pub fn w_out(&self) -> &Matrix {
        &self.w_out
    }

    pub fn num_params(&self) -> usize {
        let per_layer: usize = self
            .layers
            .iter()
            .map(|l| {
                l.wq.data().len()
                    + l.wk.data().len()
                    + l.wv.data().len()
                    + l.wo.data().len()
                    + l.w1.data().len()
                    + l.b1.len()
                    + l.w2.data().len()
                    + l.b2.len()
            })
            .sum();
        self.embed.data().len() + per_layer + self.w_out.data().len()
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.cfg.vocab) {
            Some(&id) => Err(Error::UnknownToken {
                id,
                vocab: self.cfg.vocab,
            }),
            None => Ok(()),
        }
    }

    pub fn embed(&self, tokens: &[u32]) -> Result<Matrix> {
        self.check_tokens(tokens)?;
        let mut x = Matrix::zeros(tokens.len(), self.cfg.model_dim());
        for (r, &t) in tokens.iter().enumerate() {
            x.row_mut(r).copy_from_slice(self.embed.row(t as usize));
        }
        Ok(x)
    }

    /// Attention inputs of layer `l` for rows of `x` starting at position `offset`.
    pub fn layer_qkv(&self, l: usize, x: &Matrix, offset: usize) -> Result<LayerQkv> {
        let w = &self.layers[l];
        let d = self.cfg.head_dim;
        let normed = rms_norm_rows(x, self.cfg.norm_eps);
        let q = normed.matmul(&w.wq)?;
        let k = normed.matmul(&w.wk)?;
        let v = normed.matmul(&w.wv)?;
        let mut q_pre = Vec::with_capacity(self.cfg.heads);
        let mut q_rope = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let block = q.col_block(h * d, d);
            q_rope.push(rope_rows(&block, offset, &self.rope)?);
            q_pre.push(block);
        }
        let mut k_pre = Vec::with_capacity(self.cfg.kv_heads);
        let mut k_rope = Vec::with_capacity(self.cfg.kv_heads);
        let mut vs = Vec::with_capacity(self.cfg.kv_heads);
        for h in 0..self.cfg.kv_heads {
            let block = k.col_block(h * d, d);
            k_rope.push(rope_rows(&block, offset, &self.rope)?);
            k_pre.push(block);
            vs.push(v.col_block(h * d, d));
        }
        Ok(LayerQkv {
            offset,
            normed,
            q_rope,
            q_pre,
            k_pre,
            k_rope,
            v: vs,
        })
    }

    /// Residual attention projection followed by the residual MLP.
    pub fn layer_finish(&self, l: usize, x: &Matrix, attn_concat: &Matrix) -> Result<Matrix> {
        let w = &self.layers[l];
        let mut x1 = x.clone();
        x1.add_assign(&attn_concat.matmul(&w.wo)?)?;
        let m = rms_norm_rows(&x1, self.cfg.norm_eps);
        let mut u = m.matmul(&w.w1)?;
        for r in 0..u.rows() {
            for (val, b) in u.row_mut(r).iter_mut().zip(&w.b1) {
                *val = gelu(*val + b);
            }
        }
        let mut y = u.matmul(&w.w2)?;
        for r in 0..y.rows() {
            for (val, b) in y.row_mut(r).iter_mut().zip(&w.b2) {
                *val += b;
            }
        }
        x1.add_assign(&y)?;
        Ok(x1)
    }

    pub fn final_hidden(&self, x: &Matrix) -> Matrix {
        rms_norm_rows(x, self.cfg.norm_eps)
    }

    pub fn logits(&self, hidden: &Matrix) -> Result<Matrix> {
        hidden.matmul(&self.w_out)
    }

    /// Full forward with caller-supplied attention.
    ///
    /// `attn(layer, qkv)` must return the concatenated per-query-head outputs
    /// (`rows x heads*head_dim`).
    pub fn forward_with<F>(
        &self,
        tokens: &[u32],
        offset: usize,
        mut attn: F,
    ) -> Result<ForwardOutput>
    where
        F: FnMut(usize, &LayerQkv) -> Result<Matrix>,
    {
        let mut x = self.embed(tokens)?;
        for l in 0..self.cfg.layers {
            let qkv = self.layer_qkv(l, &x, offset)?;
            let o = attn(l, &qkv)?;
            x = self.layer_finish(l, &x, &o)?;
        }
        let hidden = self.final_hidden(&x);
        let logits = self.logits(&hidden)?;
        Ok(ForwardOutput { hidden, logits })
    }

    /// Concatenate per-query-head outputs.
    pub fn concat_heads(&self, heads: &[Matrix]) -> Matrix {
        let rows = heads.first().map_or(0, Matrix::rows);
        let mut out = Matrix::zeros(rows, self.cfg.model_dim());
        for (h, m) in heads.iter().enumerate() {
            out.set_col_block(h * self.cfg.head_dim, m);
        }
        out
    }
}

fn unit_vector(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    let v = rng.gaussian_vec(n, 1.0);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn orthogonal_unit(rng: &mut SeededRng, other: &[f64]) -> Vec<f64> {
    let mut v = rng.gaussian_vec(other.len(), 1.0);
    let proj: f64 = v.iter().zip(other).map(|(a, b)| a * b).sum();
    for (x, o) in v.iter_mut().zip(other) {
        *x -= proj * o;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

pub fn argmax(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}
