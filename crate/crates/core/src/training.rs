//! Gate training by distillation against the frozen full-attention teacher.
//!
//! The student runs the same weights with soft log-bias write-gated
//! attention. Only gate parameters receive gradients; activation gradients
//! flow back through attention, MLP and norms to reach earlier layers' keys.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{attn_dense, AttnInput, OpCounter};
use crate::corpus::SyntheticCorpus;
use crate::engine::{prefill, PolicyConfig};
use crate::error::{Error, Result};
use crate::gating::{
    build_gate_feature, gate_backward_accumulate, gate_forward_detailed, GateActivations, GateInit,
    GateParams, GateScore, HeadGate, Threshold,
};
use crate::model::{argmax, LayerQkv, ToyModel};
use crate::numerics::{
    apply_rope_inverse, dot, gelu, gelu_grad, rms_norm_backward, rms_norm_rows, seeded_rng,
    softmax_stable, Matrix,
};

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_distill: f64,
    pub m_soft: f64,
    pub l_total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn new(l_distill: f64, m_soft: f64, lambda: f64) -> Self {
        Self {
            l_distill,
            m_soft,
            l_total: l_distill + lambda * m_soft,
            lambda,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Gd,
    Momentum { beta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub window: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub batch_size: usize,
    /// Crop each sampled sequence to a length drawn from this range; `None` keeps whole sequences.
    #[serde(default)]
    pub seq_len: Option<(usize, usize)>,
    pub gate_hidden: usize,
    pub gate_init: GateInit,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.08,
            learning_rate: 0.5,
            steps: 200,
            window: 16,
            seed: 0,
            optimizer: Optimizer::Momentum { beta: 0.9 },
            batch_size: 8,
            seq_len: None,
            gate_hidden: 16,
            gate_init: GateInit::default(),
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.steps == 0 {
            return Err(Error::InvalidArgument(
                "learning rate and steps must be positive".into(),
            ));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lambda {} must be non-negative",
                self.lambda
            )));
        }
        if self.window == 0 || self.batch_size == 0 || self.gate_hidden == 0 {
            return Err(Error::InvalidArgument(
                "window, batch size and gate width must be positive".into(),
            ));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument("epsilon must be positive".into()));
        }
        if let Optimizer::Momentum { beta } = self.optimizer {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::InvalidArgument(format!(
                    "momentum {beta} outside [0, 1)"
                )));
            }
        }
        if let Some((lo, hi)) = self.seq_len {
            if lo == 0 || lo > hi {
                return Err(Error::InvalidArgument(format!(
                    "bad length range {lo}..={hi}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub lambda: f64,
    pub tau: f64,
    pub val_loss: f64,
    pub cache_frac: f64,
}

/// Mean squared difference over every entry.
pub fn loss_distill(student: &Matrix, teacher: &Matrix) -> Result<f64> {
    if student.rows() != teacher.rows() || student.cols() != teacher.cols() {
        return Err(Error::Shape(format!(
            "student {}x{} vs teacher {}x{}",
            student.rows(),
            student.cols(),
            teacher.rows(),
            teacher.cols()
        )));
    }
    let n = student.data().len();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = student
        .data()
        .iter()
        .zip(teacher.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / n as f64)
}

/// Mean of `g + g(1 - g)`.
pub fn loss_sparsity(gates: &[f64]) -> Result<f64> {
    if gates.is_empty() {
        return Err(Error::InvalidArgument("no gate scores".into()));
    }
    Ok(gates.iter().map(|&g| 2.0 * g - g * g).sum::<f64>() / gates.len() as f64)
}

/// Final hidden states of the frozen model under dense causal attention.
pub fn teacher_hidden(model: &ToyModel, tokens: &[u32]) -> Result<Matrix> {
    let cfg = *model.config();
    let out = model.forward_with(tokens, 0, |_, qkv| {
        let heads = (0..cfg.heads)
            .map(|h| {
                let kv = cfg.kv_head_of(h);
                attn_dense(
                    &AttnInput::new(&qkv.q_rope[h], &qkv.k_rope[kv], &qkv.v[kv], 0)?,
                    &mut OpCounter::default(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(model.concat_heads(&heads))
    })?;
    Ok(out.hidden)
}

struct LayerTape {
    x: Matrix,
    qkv: LayerQkv,
    /// `[kv head][t]`
    features: Vec<Vec<Vec<f64>>>,
    acts: Vec<Vec<GateActivations>>,
    /// Row-stochastic attention weights per query head (`T x T`, causal).
    probs: Vec<Matrix>,
    /// Attention output of every query head, before `Wo`.
    concat: Matrix,
    x1: Matrix,
    /// MLP pre-activation.
    u: Matrix,
}

struct Tape {
    layers: Vec<LayerTape>,
    x_final: Matrix,
    hidden: Matrix,
}

impl Tape {
    fn gate_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.acts.iter().flat_map(|h| h.iter().map(|a| a.g)))
    }
}

fn soft_head(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    g: &[f64],
    window: usize,
    epsilon: f64,
) -> Result<(Matrix, Matrix)> {
    let t = q.rows();
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let in_window = (1.0 + epsilon).ln();
    let mut probs = Matrix::zeros(t, t);
    let mut out = Matrix::zeros(t, v.cols());
    for i in 0..t {
        let logits: Vec<f64> = (0..=i)
            .map(|j| {
                let bias = if i - j < window {
                    in_window
                } else {
                    (g[j] + epsilon).ln()
                };
                dot(q.row(i), k.row(j)) * scale + bias
            })
            .collect();
        let p = softmax_stable(&logits).map_err(|_| Error::FullySuppressedRow { row: i })?;
        let o = out.row_mut(i);
        for (j, &w) in p.iter().enumerate() {
            for (ov, vv) in o.iter_mut().zip(v.row(j)) {
                *ov += w * vv;
            }
        }
        probs.row_mut(i)[..=i].copy_from_slice(&p);
    }
    Ok((out, probs))
}

fn check_shapes(model: &ToyModel, gates: &GateParams, window: usize) -> Result<()> {
    let cfg = model.config();
    if gates.layers() != cfg.layers
        || gates.kv_heads() != cfg.kv_heads
        || gates.head_dim() != cfg.head_dim
    {
        return Err(Error::Shape(
            "gate parameters do not match the model".into(),
        ));
    }
    if window == 0 {
        return Err(Error::InvalidArgument("window must be at least 1".into()));
    }
    Ok(())
}

fn head_acts(gate: &HeadGate, features: &[Vec<f64>]) -> Result<Vec<GateActivations>> {
    features
        .iter()
        .map(|x| gate_forward_detailed(gate, x))
        .collect()
}

/// Residual update after attention: `(x1, u, next)`.
fn layer_tail(
    model: &ToyModel,
    l: usize,
    x: &Matrix,
    concat: &Matrix,
) -> Result<(Matrix, Matrix, Matrix)> {
    let cfg = *model.config();
    let t = x.rows();
    let w = model.layer(l);
    let mut x1 = x.clone();
    x1.add_assign(&concat.matmul(&w.wo)?)?;
    let m = rms_norm_rows(&x1, cfg.norm_eps);
    let mut u = m.matmul(&w.w1)?;
    for r in 0..t {
        for (val, b) in u.row_mut(r).iter_mut().zip(&w.b1) {
            *val += b;
        }
    }
    let mut y = Matrix::zeros(t, cfg.mlp_hidden);
    for (o, &val) in y.data_mut().iter_mut().zip(u.data()) {
        *o = gelu(val);
    }
    let mut y = y.matmul(&w.w2)?;
    for r in 0..t {
        for (val, b) in y.row_mut(r).iter_mut().zip(&w.b2) {
            *val += b;
        }
    }
    let mut next = x1.clone();
    next.add_assign(&y)?;
    Ok((x1, u, next))
}

fn soft_layer(
    model: &ToyModel,
    gates: &GateParams,
    l: usize,
    x: Matrix,
    window: usize,
    epsilon: f64,
) -> Result<(LayerTape, Matrix)> {
    let cfg = *model.config();
    let t = x.rows();
    let qkv = model.layer_qkv(l, &x, 0)?;
    let mut features = Vec::with_capacity(cfg.kv_heads);
    let mut acts = Vec::with_capacity(cfg.kv_heads);
    for h in 0..cfg.kv_heads {
        let f = (0..t)
            .map(|r| build_gate_feature(qkv.k_pre[h].row(r), qkv.k_rope[h].row(r)))
            .collect::<Result<Vec<_>>>()?;
        acts.push(head_acts(gates.head(l, h), &f)?);
        features.push(f);
    }
    let mut probs = Vec::with_capacity(cfg.heads);
    let mut concat = Matrix::zeros(t, cfg.model_dim());
    for a in 0..cfg.heads {
        let kv = cfg.kv_head_of(a);
        let g: Vec<f64> = acts[kv].iter().map(|x| x.g).collect();
        let (o, p) = soft_head(
            &qkv.q_rope[a],
            &qkv.k_rope[kv],
            &qkv.v[kv],
            &g,
            window,
            epsilon,
        )?;
        concat.set_col_block(a * cfg.head_dim, &o);
        probs.push(p);
    }
    let (x1, u, next) = layer_tail(model, l, &x, &concat)?;
    Ok((
        LayerTape {
            x,
            qkv,
            features,
            acts,
            probs,
            concat,
            x1,
            u,
        },
        next,
    ))
}

fn soft_forward_tape(
    model: &ToyModel,
    gates: &GateParams,
    tokens: &[u32],
    window: usize,
    epsilon: f64,
) -> Result<Tape> {
    check_shapes(model, gates, window)?;
    let cfg = *model.config();
    let mut x = model.embed(tokens)?;
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let (tape, next) = soft_layer(model, gates, l, x, window, epsilon)?;
        layers.push(tape);
        x = next;
    }
    let hidden = rms_norm_rows(&x, cfg.norm_eps);
    Ok(Tape {
        layers,
        x_final: x,
        hidden,
    })
}

/// Soft write-gated forward: final hidden states and every gate score.
pub fn forward_soft(
    model: &ToyModel,
    gates: &GateParams,
    tokens: &[u32],
    window: usize,
) -> Result<(Matrix, Vec<GateScore>)> {
    forward_soft_eps(model, gates, tokens, window, DEFAULT_EPSILON)
}

pub fn forward_soft_eps(
    model: &ToyModel,
    gates: &GateParams,
    tokens: &[u32],
    window: usize,
    epsilon: f64,
) -> Result<(Matrix, Vec<GateScore>)> {
    let tape = soft_forward_tape(model, gates, tokens, window, epsilon)?;
    let mut scores = Vec::new();
    for (l, layer) in tape.layers.iter().enumerate() {
        for (h, acts) in layer.acts.iter().enumerate() {
            for (position, a) in acts.iter().enumerate() {
                scores.push(GateScore {
                    value: a.g,
                    layer: l,
                    head: h,
                    position,
                });
            }
        }
    }
    Ok((tape.hidden, scores))
}

fn rows_backward(x: &Matrix, grad: &Matrix, eps: f64) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        out.row_mut(r)
            .copy_from_slice(&rms_norm_backward(x.row(r), grad.row(r), eps));
    }
    out
}

fn inverse_rope_rows(m: &Matrix, model: &ToyModel) -> Result<Matrix> {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        out.row_mut(r)
            .copy_from_slice(&apply_rope_inverse(m.row(r), r, model.rope())?);
    }
    Ok(out)
}

fn backward_tape(
    model: &ToyModel,
    gates: &GateParams,
    tape: &Tape,
    teacher: &Matrix,
    window: usize,
    epsilon: f64,
    lambda: f64,
) -> Result<(LossBreakdown, GateParams)> {
    let cfg = *model.config();
    let t = tape.hidden.rows();
    let d = cfg.head_dim;
    let l_distill = loss_distill(&tape.hidden, teacher)?;
    let g_all: Vec<f64> = tape.gate_values().collect();
    let m_soft = loss_sparsity(&g_all)?;
    let loss = LossBreakdown::new(l_distill, m_soft, lambda);

    let mut grad = gates.zeros_like();
    let n = (t * cfg.model_dim()) as f64;
    let mut dh = Matrix::zeros(t, cfg.model_dim());
    for ((o, a), b) in dh
        .data_mut()
        .iter_mut()
        .zip(tape.hidden.data())
        .zip(teacher.data())
    {
        *o = 2.0 * (a - b) / n;
    }
    let mut dx = rows_backward(&tape.x_final, &dh, cfg.norm_eps);
    let sparsity_scale = lambda / (cfg.layers * cfg.kv_heads * t) as f64;
    let scale = 1.0 / (d as f64).sqrt();

    for l in (0..cfg.layers).rev() {
        let lt = &tape.layers[l];
        let w = model.layer(l);

        let mut du = dx.matmul_t(&w.w2)?;
        for (o, &u) in du.data_mut().iter_mut().zip(lt.u.data()) {
            *o *= gelu_grad(u);
        }
        let dm = du.matmul_t(&w.w1)?;
        let mut dx1 = dx;
        dx1.add_assign(&rows_backward(&lt.x1, &dm, cfg.norm_eps))?;
        let dcat = dx1.matmul_t(&w.wo)?;

        let mut dq_rope: Vec<Matrix> = (0..cfg.heads).map(|_| Matrix::zeros(t, d)).collect();
        let mut dk_rope: Vec<Matrix> = (0..cfg.kv_heads).map(|_| Matrix::zeros(t, d)).collect();
        let mut dv: Vec<Matrix> = (0..cfg.kv_heads).map(|_| Matrix::zeros(t, d)).collect();
        let mut dg: Vec<Vec<f64>> = vec![vec![0.0; t]; cfg.kv_heads];
        for a in 0..cfg.heads {
            let h = cfg.kv_head_of(a);
            let p = &lt.probs[a];
            let q = &lt.qkv.q_rope[a];
            let k = &lt.qkv.k_rope[h];
            let v = &lt.qkv.v[h];
            let acts = &lt.acts[h];
            for i in 0..t {
                let d_o: Vec<f64> = (0..d).map(|c| dcat.get(i, a * d + c)).collect();
                let prow = &p.row(i)[..=i];
                let dp: Vec<f64> = (0..=i).map(|j| dot(&d_o, v.row(j))).collect();
                let s: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for j in 0..=i {
                    let pij = prow[j];
                    let ds = pij * (dp[j] - s);
                    for (o, x) in dv[h].row_mut(j).iter_mut().zip(&d_o) {
                        *o += pij * x;
                    }
                    if ds == 0.0 {
                        continue;
                    }
                    for (o, x) in dq_rope[a].row_mut(i).iter_mut().zip(k.row(j)) {
                        *o += scale * ds * x;
                    }
                    for (o, x) in dk_rope[h].row_mut(j).iter_mut().zip(q.row(i)) {
                        *o += scale * ds * x;
                    }
                    if i - j >= window {
                        dg[h][j] += ds / (acts[j].g + epsilon);
                    }
                }
            }
        }

        let mut dk_pre: Vec<Matrix> = (0..cfg.kv_heads).map(|_| Matrix::zeros(t, d)).collect();
        for h in 0..cfg.kv_heads {
            let gate = gates.head(l, h);
            let gh = grad.head_mut(l, h);
            let mut dfeat = vec![0.0; 2 * d];
            for r in 0..t {
                let act = &lt.acts[h][r];
                let upstream = dg[h][r] + sparsity_scale * (2.0 - 2.0 * act.g);
                dfeat.iter_mut().for_each(|x| *x = 0.0);
                gate_backward_accumulate(gate, &lt.features[h][r], act, upstream, gh, &mut dfeat);
                for c in 0..d {
                    *dk_pre[h].row_mut(r).get_mut(c).expect("dim") += dfeat[c];
                    *dk_rope[h].row_mut(r).get_mut(c).expect("dim") += dfeat[d + c];
                }
            }
        }
        if l == 0 {
            break;
        }

        let mut dq = Matrix::zeros(t, cfg.model_dim());
        for a in 0..cfg.heads {
            dq.set_col_block(a * d, &inverse_rope_rows(&dq_rope[a], model)?);
        }
        let mut dk = Matrix::zeros(t, cfg.kv_dim());
        let mut dvm = Matrix::zeros(t, cfg.kv_dim());
        for h in 0..cfg.kv_heads {
            let mut block = inverse_rope_rows(&dk_rope[h], model)?;
            block.add_assign(&dk_pre[h])?;
            dk.set_col_block(h * d, &block);
            dvm.set_col_block(h * d, &dv[h]);
        }
        let mut dn = dq.matmul_t(&w.wq)?;
        dn.add_assign(&dk.matmul_t(&w.wk)?)?;
        dn.add_assign(&dvm.matmul_t(&w.wv)?)?;
        let mut next = dx1;
        next.add_assign(&rows_backward(&lt.x, &dn, cfg.norm_eps))?;
        dx = next;
    }
    Ok((loss, grad))
}

/// Loss and gate gradients against a precomputed teacher.
pub fn backward_gates_with_teacher(
    model: &ToyModel,
    gates: &GateParams,
    tokens: &[u32],
    teacher: &Matrix,
    window: usize,
    lambda: f64,
    epsilon: f64,
) -> Result<(LossBreakdown, GateParams)> {
    let tape = soft_forward_tape(model, gates, tokens, window, epsilon)?;
    backward_tape(model, gates, &tape, teacher, window, epsilon, lambda)
}

/// `L_total` and its gradient with respect to every gate parameter.
pub fn backward_gates(
    model: &ToyModel,
    gates: &GateParams,
    tokens: &[u32],
    window: usize,
    lambda: f64,
) -> Result<(LossBreakdown, GateParams)> {
    let teacher = teacher_hidden(model, tokens)?;
    backward_gates_with_teacher(
        model,
        gates,
        tokens,
        &teacher,
        window,
        lambda,
        DEFAULT_EPSILON,
    )
}

/// Loss only, for finite differences and evaluation.
pub fn total_loss(
    model: &ToyModel,
    gates: &GateParams,
    tokens: &[u32],
    teacher: &Matrix,
    window: usize,
    lambda: f64,
    epsilon: f64,
) -> Result<LossBreakdown> {
    let tape = soft_forward_tape(model, gates, tokens, window, epsilon)?;
    let l_distill = loss_distill(&tape.hidden, teacher)?;
    let g: Vec<f64> = tape.gate_values().collect();
    Ok(LossBreakdown::new(l_distill, loss_sparsity(&g)?, lambda))
}

fn head_param(gate: &mut HeadGate, i: usize) -> &mut f64 {
    let n1 = gate.w1.data().len();
    let h = gate.b1.len();
    if i < n1 {
        &mut gate.w1.data_mut()[i]
    } else if i < n1 + h {
        &mut gate.b1[i - n1]
    } else if i < n1 + 2 * h {
        &mut gate.w2[i - n1 - h]
    } else {
        &mut gate.b2
    }
}

/// `L_total` with only gate `(l, kv)` changed relative to `tape`.
///
/// Equal bit for bit to [`total_loss`] on the same parameters.
#[allow(clippy::too_many_arguments)]
fn loss_from_layer(
    model: &ToyModel,
    gates: &GateParams,
    tape: &Tape,
    l: usize,
    kv: usize,
    teacher: &Matrix,
    window: usize,
    lambda: f64,
    epsilon: f64,
) -> Result<f64> {
    let cfg = *model.config();
    let t = tape.hidden.rows();
    let layer = &tape.layers[l];
    let acts = head_acts(gates.head(l, kv), &layer.features[kv])?;
    let g: Vec<f64> = acts.iter().map(|a| a.g).collect();
    let mut concat = layer.concat.clone();
    for a in (0..cfg.heads).filter(|&a| cfg.kv_head_of(a) == kv) {
        let (o, _) = soft_head(
            &layer.qkv.q_rope[a],
            &layer.qkv.k_rope[kv],
            &layer.qkv.v[kv],
            &g,
            window,
            epsilon,
        )?;
        concat.set_col_block(a * cfg.head_dim, &o);
    }
    let (_, _, mut x) = layer_tail(model, l, &layer.x, &concat)?;

    let mut scores: Vec<f64> = tape.gate_values().collect();
    let at = (l * cfg.kv_heads + kv) * t;
    scores[at..at + t].copy_from_slice(&g);
    for l2 in l + 1..cfg.layers {
        let (lt, next) = soft_layer(model, gates, l2, x, window, epsilon)?;
        for (h, acts) in lt.acts.iter().enumerate() {
            let at = (l2 * cfg.kv_heads + h) * t;
            for (dst, a) in scores[at..at + t].iter_mut().zip(acts) {
                *dst = a.g;
            }
        }
        x = next;
    }
    let hidden = rms_norm_rows(&x, cfg.norm_eps);
    Ok(LossBreakdown::new(
        loss_distill(&hidden, teacher)?,
        loss_sparsity(&scores)?,
        lambda,
    )
    .l_total)
}

/// Central finite differences of `L_total` for every gate parameter, in [`GateParams::to_flat`] order.
///
/// Layers below the perturbed gate are taken from one unperturbed pass.
#[allow(clippy::too_many_arguments)]
pub fn finite_difference_grad(
    model: &ToyModel,
    gates: &GateParams,
    tokens: &[u32],
    teacher: &Matrix,
    window: usize,
    lambda: f64,
    epsilon: f64,
    step: f64,
) -> Result<Vec<f64>> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let tape = soft_forward_tape(model, gates, tokens, window, epsilon)?;
    let cfg = *model.config();
    let mut probe = gates.clone();
    let mut out = Vec::with_capacity(gates.num_params());
    for l in 0..cfg.layers {
        for kv in 0..cfg.kv_heads {
            for i in 0..gates.head(l, kv).num_params() {
                let base = *head_param(probe.head_mut(l, kv), i);
                *head_param(probe.head_mut(l, kv), i) = base + step;
                let up = loss_from_layer(
                    model, &probe, &tape, l, kv, teacher, window, lambda, epsilon,
                )?;
                *head_param(probe.head_mut(l, kv), i) = base - step;
                let down = loss_from_layer(
                    model, &probe, &tape, l, kv, teacher, window, lambda, epsilon,
                )?;
                *head_param(probe.head_mut(l, kv), i) = base;
                out.push((up - down) / (2.0 * step));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub gates: GateParams,
    pub history: Vec<LossBreakdown>,
}

impl TrainResult {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,l_distill,m_soft,l_total")?;
        for (s, h) in self.history.iter().enumerate() {
            writeln!(
                w,
                "{s},{:.16e},{:.16e},{:.16e}",
                h.l_distill, h.m_soft, h.l_total
            )?;
        }
        Ok(())
    }
}

/// Minibatch descent on the mean `L_total` of each batch.
///
/// Per-sequence gradients are computed in parallel and summed in batch order.
pub fn train(
    model: &ToyModel,
    config: &TrainConfig,
    corpus: &SyntheticCorpus,
) -> Result<TrainResult> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty corpus".into()));
    }
    let cfg = *model.config();
    let mut rng = seeded_rng(config.seed);
    let mut gates = GateParams::init(
        cfg.layers,
        cfg.kv_heads,
        cfg.head_dim,
        config.gate_hidden,
        config.gate_init,
        &mut rng,
    );
    let teachers = corpus
        .sequences
        .par_iter()
        .map(|s| teacher_hidden(model, &s.tokens))
        .collect::<Result<Vec<_>>>()?;
    let mut velocity = gates.zeros_like();
    let mut history = Vec::with_capacity(config.steps);
    let mut order: Vec<usize> = Vec::new();
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if order.is_empty() {
                order = (0..corpus.len()).collect();
                rng.shuffle(&mut order);
            }
            let idx = order.pop().expect("refilled");
            let len = corpus.sequences[idx].tokens.len();
            let crop = match config.seq_len {
                Some((lo, hi)) => rng.index(lo.min(len), hi.min(len) + 1),
                None => len,
            };
            batch.push((idx, crop));
        }
        let results = batch
            .par_iter()
            .map(|&(idx, crop)| {
                let tokens = &corpus.sequences[idx].tokens[..crop];
                let teacher = Matrix::from_vec(
                    crop,
                    cfg.model_dim(),
                    teachers[idx].data()[..crop * cfg.model_dim()].to_vec(),
                )?;
                backward_gates_with_teacher(
                    model,
                    &gates,
                    tokens,
                    &teacher,
                    config.window,
                    config.lambda,
                    config.epsilon,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let inv = 1.0 / results.len() as f64;
        let mut grad = gates.zeros_like();
        let (mut ld, mut ms) = (0.0, 0.0);
        for (loss, g) in &results {
            grad.axpy(inv, g);
            ld += inv * loss.l_distill;
            ms += inv * loss.m_soft;
        }
        let loss = LossBreakdown::new(ld, ms, config.lambda);
        if !loss.l_total.is_finite() || !grad.is_finite() {
            return Err(Error::Diverged { step });
        }
        history.push(loss);
        match config.optimizer {
            Optimizer::Gd => gates.axpy(-config.learning_rate, &grad),
            Optimizer::Momentum { beta } => {
                velocity.scale(beta);
                velocity.axpy(1.0, &grad);
                gates.axpy(-config.learning_rate, &velocity);
            }
        }
        if !gates.is_finite() {
            return Err(Error::Diverged { step });
        }
    }
    Ok(TrainResult { gates, history })
}

/// Hard-routing evaluation of trained gates on annotated sequences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardEval {
    pub tau: f64,
    /// Distillation loss of the vertical-slash prefill against the teacher.
    pub l_distill: f64,
    /// Mean resident entries per head over sequence length.
    pub cache_frac: f64,
    /// Fraction of (layer, head, position) gates at or above `tau`.
    pub admitted_fraction: f64,
    pub anchor_gate_mean: f64,
    pub other_gate_mean: f64,
    /// Share of cue positions where the student's greedy prediction equals the teacher's.
    pub cue_agreement: f64,
    pub cues: usize,
}

pub fn evaluate_hard(
    model: &ToyModel,
    gates: &GateParams,
    corpus: &SyntheticCorpus,
    window: usize,
    tau: Threshold,
) -> Result<HardEval> {
    evaluate_policy(model, gates, corpus, &PolicyConfig::wgkv(window, tau))
}

/// [`evaluate_hard`] for an arbitrary policy (prefill only).
pub fn evaluate_policy(
    model: &ToyModel,
    gates: &GateParams,
    corpus: &SyntheticCorpus,
    policy: &PolicyConfig,
) -> Result<HardEval> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty validation set".into()));
    }
    let cfg = *model.config();
    let heads = cfg.layers * cfg.kv_heads;
    let layout = corpus.layout;
    struct One {
        l_distill: f64,
        cache_frac: f64,
        admitted: usize,
        gates: usize,
        anchor: (f64, usize),
        other: (f64, usize),
        agree: usize,
        cues: usize,
    }
    let per = corpus
        .sequences
        .par_iter()
        .map(|s| -> Result<One> {
            let t = s.tokens.len();
            let policy = PolicyConfig {
                max_tokens: t,
                ..policy.clone()
            };
            let full = PolicyConfig {
                max_tokens: t,
                ..PolicyConfig::full(policy.window)
            };
            let (session, out) = prefill(model, gates, &s.tokens, &policy)?;
            let (_, teacher) = prefill(model, gates, &s.tokens, &full)?;
            let mut one = One {
                l_distill: loss_distill(&out.hidden, &teacher.hidden)?,
                cache_frac: session
                    .caches()
                    .iter()
                    .map(|c| c.resident() as f64)
                    .sum::<f64>()
                    / (heads * t) as f64,
                admitted: 0,
                gates: 0,
                anchor: (0.0, 0),
                other: (0.0, 0),
                agree: 0,
                cues: s.pairs.len(),
            };
            for l in 0..cfg.layers {
                for h in 0..cfg.kv_heads {
                    for (pos, &g) in session.scores(l, h).iter().enumerate() {
                        one.gates += 1;
                        one.admitted += usize::from(policy.threshold.admits(g));
                        let slot = if layout.is_anchor(s.tokens[pos]) {
                            &mut one.anchor
                        } else {
                            &mut one.other
                        };
                        slot.0 += g;
                        slot.1 += 1;
                    }
                }
            }
            for p in &s.pairs {
                one.agree += usize::from(
                    argmax(out.logits.row(p.cue_pos)) == argmax(teacher.logits.row(p.cue_pos)),
                );
            }
            Ok(one)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per.len() as f64;
    let sum = |f: &dyn Fn(&One) -> f64| per.iter().map(f).sum::<f64>();
    let count = |f: &dyn Fn(&One) -> usize| per.iter().map(f).sum::<usize>();
    let ratio = |a: f64, b: usize| if b == 0 { 0.0 } else { a / b as f64 };
    let cues = count(&|o| o.cues);
    Ok(HardEval {
        tau: policy.threshold.tau(),
        l_distill: sum(&|o| o.l_distill) / n,
        cache_frac: sum(&|o| o.cache_frac) / n,
        admitted_fraction: ratio(count(&|o| o.admitted) as f64, count(&|o| o.gates)),
        anchor_gate_mean: ratio(sum(&|o| o.anchor.0), count(&|o| o.anchor.1)),
        other_gate_mean: ratio(sum(&|o| o.other.0), count(&|o| o.other.1)),
        cue_agreement: ratio(count(&|o| o.agree) as f64, cues),
        cues,
    })
}

/// One trained λ of a sweep with its evaluations per τ.
#[derive(Debug, Clone)]
pub struct SweepRun {
    pub lambda: f64,
    pub result: TrainResult,
    pub evals: Vec<HardEval>,
}

pub fn sweep_detailed(
    model: &ToyModel,
    lambdas: &[f64],
    taus: &[f64],
    corpus: &SyntheticCorpus,
    validation: &SyntheticCorpus,
    base: &TrainConfig,
) -> Result<Vec<SweepRun>> {
    if lambdas.is_empty() || taus.is_empty() {
        return Err(Error::InvalidArgument("empty sweep grid".into()));
    }
    let taus = taus
        .iter()
        .map(|&t| Threshold::new(t))
        .collect::<Result<Vec<_>>>()?;
    lambdas
        .iter()
        .map(|&lambda| {
            let config = TrainConfig {
                lambda,
                ..base.clone()
            };
            let result = train(model, &config, corpus)?;
            let evals = taus
                .iter()
                .map(|&tau| evaluate_hard(model, &result.gates, validation, base.window, tau))
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepRun {
                lambda,
                result,
                evals,
            })
        })
        .collect()
}

/// Train per λ, evaluate per (λ, τ); points sorted by cache size.
pub fn sweep(
    model: &ToyModel,
    lambdas: &[f64],
    taus: &[f64],
    corpus: &SyntheticCorpus,
    validation: &SyntheticCorpus,
    base: &TrainConfig,
) -> Result<Vec<ParetoPoint>> {
    let runs = sweep_detailed(model, lambdas, taus, corpus, validation, base)?;
    Ok(pareto_points(&runs))
}

pub fn pareto_points(runs: &[SweepRun]) -> Vec<ParetoPoint> {
    let mut points: Vec<ParetoPoint> = runs
        .iter()
        .flat_map(|r| {
            r.evals.iter().map(move |e| ParetoPoint {
                lambda: r.lambda,
                tau: e.tau,
                val_loss: e.l_distill,
                cache_frac: e.cache_frac,
            })
        })
        .collect();
    points.sort_by(|a, b| {
        a.cache_frac
            .total_cmp(&b.cache_frac)
            .then(a.lambda.total_cmp(&b.lambda))
            .then(a.tau.total_cmp(&b.tau))
    });
    points
}

pub fn write_pareto_csv<W: Write>(points: &[ParetoPoint], mut w: W) -> Result<()> {
    writeln!(w, "lambda,tau,val_loss,cache_frac")?;
    for p in points {
        writeln!(
            w,
            "{:.16e},{:.16e},{:.16e},{:.16e}",
            p.lambda, p.tau, p.val_loss, p.cache_frac
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub loss: f64,
    pub memory: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleVerdict {
    /// Index of the unconstrained minimiser.
    pub argmin: usize,
    pub objective: f64,
    /// A candidate within the budget with strictly lower loss, if any.
    pub counterexample: Option<usize>,
}

impl OracleVerdict {
    pub fn holds(&self) -> bool {
        self.counterexample.is_none()
    }
}

/// Enumerate `loss + lambda * memory`, then check by brute force that no
/// candidate using at most the minimiser's memory has lower loss.
///
/// Objective ties go to the lower loss, then the lower index.
pub fn constrained_oracle(candidates: &[Candidate], lambda: f64) -> Result<OracleVerdict> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidates".into()));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda {lambda} must be positive"
        )));
    }
    let objective = |c: &Candidate| c.loss + lambda * c.memory;
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate().skip(1) {
        let (o, ob) = (objective(c), objective(&candidates[best]));
        if o < ob || (o == ob && c.loss < candidates[best].loss) {
            best = i;
        }
    }
    let star = candidates[best];
    let counterexample = candidates
        .iter()
        .position(|c| c.memory <= star.memory && c.loss < star.loss);
    Ok(OracleVerdict {
        argmin: best,
        objective: objective(&star),
        counterexample,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppendixSummary {
    pub checked: usize,
    pub counterexamples: usize,
}

/// Randomised check of [`constrained_oracle`]: `sets` candidate sets of 1 to
/// 64 points with uniform losses, memories either integral (ties likely) or
/// continuous, and log-uniform λ in `[1e-3, 10]`.
pub fn appendix_suite(sets: usize, seed: u64) -> Result<AppendixSummary> {
    let mut rng = seeded_rng(seed);
    let mut counterexamples = 0;
    for s in 0..sets {
        let n = rng.index(1, 65);
        let integral = s % 2 == 0;
        let candidates: Vec<Candidate> = (0..n)
            .map(|_| Candidate {
                loss: rng.uniform(),
                memory: if integral {
                    rng.index(0, 16) as f64
                } else {
                    rng.uniform_range(0.0, 16.0)
                },
            })
            .collect();
        let lambda = 10f64.powf(rng.uniform_range(-3.0, 1.0));
        if !constrained_oracle(&candidates, lambda)?.holds() {
            counterexamples += 1;
        }
    }
    Ok(AppendixSummary {
        checked: sets,
        counterexamples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{attn_write_gated_logbias, attn_write_gated_mul, GateVector};
    use crate::corpus::{gen_corpus, CorpusLayout};
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    fn small_model(seed: u64) -> ToyModel {
        ToyModel::random(
            ModelConfig {
                mlp_hidden: 32,
                ..ModelConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    fn gates(seed: u64, std: f64, bias: f64) -> GateParams {
        GateParams::init(
            2,
            4,
            16,
            6,
            GateInit {
                weight_std: std,
                out_bias: bias,
            },
            &mut seeded_rng(seed),
        )
    }

    fn tokens(seed: u64, n: usize) -> Vec<u32> {
        let mut rng = seeded_rng(seed);
        (0..n).map(|_| rng.index(0, 64) as u32).collect()
    }

    #[test]
    fn distill_examples() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]).unwrap();
        assert_eq!(loss_distill(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b.data_mut().iter_mut().for_each(|x| *x += 1.0);
        assert_eq!(loss_distill(&a, &b).unwrap(), 1.0);
        let mut rng = seeded_rng(1);
        let x = Matrix::gaussian(5, 7, 1.0, &mut rng);
        let y = Matrix::gaussian(5, 7, 1.0, &mut rng);
        let mut naive = 0.0;
        for r in 0..5 {
            for c in 0..7 {
                naive += (x.get(r, c) - y.get(r, c)).powi(2);
            }
        }
        assert!((loss_distill(&x, &y).unwrap() - naive / 35.0).abs() < 1e-15);
        assert!(loss_distill(&x, &Matrix::zeros(5, 6)).is_err());
    }

    #[test]
    fn sparsity_examples() {
        assert_eq!(loss_sparsity(&[0.0; 4]).unwrap(), 0.0);
        assert_eq!(loss_sparsity(&[1.0; 4]).unwrap(), 1.0);
        assert_eq!(loss_sparsity(&[0.5; 4]).unwrap(), 0.75);
        assert!(loss_sparsity(&[]).is_err());
    }

    proptest! {
        #[test]
        fn sparsity_in_unit_range(g in proptest::collection::vec(0.0f64..=1.0, 1..50)) {
            let m = loss_sparsity(&g).unwrap();
            prop_assert!((0.0..=1.0).contains(&m));
        }

        #[test]
        fn total_decomposes_exactly(ld in 0.0f64..10.0, ms in 0.0f64..1.0, lambda in 0.0f64..5.0) {
            let b = LossBreakdown::new(ld, ms, lambda);
            prop_assert_eq!(b.l_total, ld + lambda * ms);
            let ulp = f64::from_bits(b.l_total.to_bits() + 1) - b.l_total;
            prop_assert!((b.l_total - b.l_distill - b.lambda * b.m_soft).abs() <= ulp);
        }
    }

    #[test]
    fn saturated_soft_forward_is_teacher() {
        let m = small_model(1);
        let toks = tokens(2, 24);
        let sat = GateParams::constant(2, 4, 16, 6, 40.0);
        let (h, _) = forward_soft(&m, &sat, &toks, 4).unwrap();
        assert!(h.max_abs_diff(&teacher_hidden(&m, &toks).unwrap()) < 1e-8);
    }

    #[test]
    fn covering_window_is_teacher_for_any_gates() {
        let m = small_model(2);
        let toks = tokens(3, 20);
        let (h, _) = forward_soft(&m, &gates(4, 1.0, -3.0), &toks, 20).unwrap();
        assert!(h.max_abs_diff(&teacher_hidden(&m, &toks).unwrap()) < 1e-8);
    }

    fn forward_via(m: &ToyModel, g: &GateParams, toks: &[u32], window: usize, mul: bool) -> Matrix {
        let cfg = *m.config();
        m.forward_with(toks, 0, |l, qkv| {
            let heads = (0..cfg.heads)
                .map(|a| {
                    let h = cfg.kv_head_of(a);
                    let gv: Vec<f64> = (0..toks.len())
                        .map(|t| {
                            let f = build_gate_feature(qkv.k_pre[h].row(t), qkv.k_rope[h].row(t))
                                .unwrap();
                            gate_forward_detailed(g.head(l, h), &f).unwrap().g
                        })
                        .collect();
                    let input = AttnInput::new(&qkv.q_rope[a], &qkv.k_rope[h], &qkv.v[h], 0)?;
                    let gv = GateVector::new(gv)?;
                    let mut c = OpCounter::default();
                    if mul {
                        attn_write_gated_mul(&input, &gv, window, &mut c)
                    } else {
                        attn_write_gated_logbias(&input, &gv, window, DEFAULT_EPSILON, &mut c)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(m.concat_heads(&heads))
        })
        .unwrap()
        .hidden
    }

    #[test]
    fn soft_forward_matches_attention_kernels() {
        let m = small_model(5);
        let toks = tokens(6, 30);
        let g = gates(7, 0.5, 0.0);
        let (h, scores) = forward_soft(&m, &g, &toks, 5).unwrap();
        assert_eq!(scores.len(), 2 * 4 * 30);
        assert!(h.max_abs_diff(&forward_via(&m, &g, &toks, 5, false)) < 1e-12);
        assert!(h.max_abs_diff(&forward_via(&m, &g, &toks, 5, true)) < 1e-5);
    }

    #[test]
    fn zero_lambda_saturated_window_has_zero_gradient() {
        let m = small_model(8);
        let toks = tokens(9, 10);
        let sat = GateParams::constant(2, 4, 16, 6, 40.0);
        let (loss, grad) = backward_gates(&m, &sat, &toks, 16, 0.0).unwrap();
        assert!(loss.l_distill < 1e-20);
        assert!(grad.l2_norm() < 1e-6);
    }

    fn rel(a: f64, b: f64, floor: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(floor)
    }

    fn fd_check(
        m: &ToyModel,
        g: &GateParams,
        toks: &[u32],
        window: usize,
        lambda: f64,
        distill: bool,
    ) -> f64 {
        let teacher = if distill {
            teacher_hidden(m, toks).unwrap()
        } else {
            forward_soft(m, g, toks, window).unwrap().0
        };
        let (_, grad) =
            backward_gates_with_teacher(m, g, toks, &teacher, window, lambda, DEFAULT_EPSILON)
                .unwrap();
        let analytic = grad.to_flat();
        let base = g.to_flat();
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        let mut probe = g.clone();
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] = base[i] + h;
            probe.set_flat(&p).unwrap();
            let f = |b: LossBreakdown| {
                if distill {
                    b.l_total
                } else {
                    lambda * b.m_soft
                }
            };
            let up =
                f(total_loss(m, &probe, toks, &teacher, window, lambda, DEFAULT_EPSILON).unwrap());
            p[i] = base[i] - h;
            probe.set_flat(&p).unwrap();
            let down =
                f(total_loss(m, &probe, toks, &teacher, window, lambda, DEFAULT_EPSILON).unwrap());
            let fd = (up - down) / (2.0 * h);
            worst = worst.max(rel(analytic[i], fd, 1e-6));
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = small_model(10);
        let toks = tokens(11, 12);
        let g = gates(12, 0.3, 0.0);
        let worst = fd_check(&m, &g, &toks, 3, 0.05, true);
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn sparsity_gradients_match_finite_differences() {
        let m = small_model(13);
        let toks = tokens(14, 9);
        let g = gates(15, 0.3, 0.5);
        let worst = fd_check(&m, &g, &toks, 3, 0.7, false);
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn prefix_reuse_matches_full_evaluation_bitwise() {
        let m = small_model(16);
        let toks = tokens(17, 10);
        let g = gates(18, 0.4, -0.2);
        let teacher = teacher_hidden(&m, &toks).unwrap();
        let fast =
            finite_difference_grad(&m, &g, &toks, &teacher, 3, 0.2, DEFAULT_EPSILON, 1e-4).unwrap();
        let base = g.to_flat();
        let mut probe = g.clone();
        for i in (0..base.len()).step_by(7) {
            let mut p = base.clone();
            p[i] = base[i] + 1e-4;
            probe.set_flat(&p).unwrap();
            let up = total_loss(&m, &probe, &toks, &teacher, 3, 0.2, DEFAULT_EPSILON)
                .unwrap()
                .l_total;
            p[i] = base[i] - 1e-4;
            probe.set_flat(&p).unwrap();
            let down = total_loss(&m, &probe, &toks, &teacher, 3, 0.2, DEFAULT_EPSILON)
                .unwrap()
                .l_total;
            assert_eq!(
                fast[i].to_bits(),
                ((up - down) / 2e-4).to_bits(),
                "param {i}"
            );
        }
        assert_eq!(fast.len(), base.len());
        assert!(
            finite_difference_grad(&m, &g, &toks, &teacher, 3, 0.2, DEFAULT_EPSILON, 0.0).is_err()
        );
    }

    #[test]
    fn appendix_example() {
        let c = [(1.0, 4.0), (0.8, 3.0), (0.5, 2.0), (0.4, 5.0)]
            .map(|(loss, memory)| Candidate { loss, memory });
        let v = constrained_oracle(&c, 0.1).unwrap();
        assert_eq!(v.argmin, 2);
        assert!((v.objective - 0.7).abs() < 1e-15);
        assert!(v.holds());
        let one = constrained_oracle(&c[..1], 3.0).unwrap();
        assert!(one.holds() && one.argmin == 0);
        assert!(constrained_oracle(&[], 1.0).is_err());
        assert!(constrained_oracle(&c, 0.0).is_err());
    }

    #[test]
    fn oracle_detects_a_planted_violation() {
        let v = OracleVerdict {
            argmin: 0,
            objective: 0.0,
            counterexample: Some(1),
        };
        assert!(!v.holds());
    }

    #[test]
    fn training_is_deterministic_and_prunes_under_pressure() {
        let m = small_model(16);
        let layout = CorpusLayout::for_vocab(64).unwrap();
        let corpus = gen_corpus(layout, 17, 6, 24, 32, 0.0).unwrap();
        let cfg = TrainConfig {
            lambda: 2.0,
            learning_rate: 2.0,
            steps: 40,
            window: 4,
            batch_size: 3,
            gate_hidden: 6,
            ..TrainConfig::default()
        };
        let a = train(&m, &cfg, &corpus).unwrap();
        let b = train(&m, &cfg, &corpus).unwrap();
        assert_eq!(a.gates, b.gates);
        assert_eq!(a.history, b.history);
        let (_, scores) = forward_soft(&m, &a.gates, &corpus.sequences[0].tokens, 4).unwrap();
        let mean = scores.iter().map(|s| s.value).sum::<f64>() / scores.len() as f64;
        assert!(mean < 0.2, "mean gate {mean}");
        let mut csv = Vec::new();
        a.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 41);
    }

    #[test]
    fn zero_lambda_keeps_sparsity_near_init() {
        let m = small_model(18);
        let layout = CorpusLayout::for_vocab(64).unwrap();
        let corpus = gen_corpus(layout, 19, 4, 24, 32, 0.05).unwrap();
        let cfg = TrainConfig {
            lambda: 0.0,
            steps: 20,
            window: 4,
            batch_size: 2,
            gate_hidden: 6,
            ..TrainConfig::default()
        };
        let r = train(&m, &cfg, &corpus).unwrap();
        let first = r.history[0].m_soft;
        let last = r.history.last().unwrap().m_soft;
        assert!((first - last).abs() < 0.05, "{first} -> {last}");
    }

    #[test]
    fn bad_configs_rejected() {
        let m = small_model(20);
        let corpus = gen_corpus(CorpusLayout::for_vocab(64).unwrap(), 1, 2, 16, 16, 0.0).unwrap();
        for cfg in [
            TrainConfig {
                steps: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: -1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                optimizer: Optimizer::Momentum { beta: 1.5 },
                ..TrainConfig::default()
            },
            TrainConfig {
                seq_len: Some((5, 2)),
                ..TrainConfig::default()
            },
        ] {
            assert!(train(&m, &cfg, &corpus).is_err());
        }
        let empty = SyntheticCorpus {
            layout: corpus.layout,
            sequences: vec![],
        };
        assert!(train(&m, &TrainConfig::default(), &empty).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let m = small_model(21);
        let corpus = gen_corpus(CorpusLayout::for_vocab(64).unwrap(), 2, 2, 16, 16, 0.0).unwrap();
        let cfg = TrainConfig {
            lambda: 1.0,
            learning_rate: f64::INFINITY,
            steps: 3,
            window: 2,
            batch_size: 1,
            gate_hidden: 6,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&m, &cfg, &corpus),
            Err(Error::Diverged { step: 0 })
        ));
    }
}
