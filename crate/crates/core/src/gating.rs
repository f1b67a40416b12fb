//! Write-gate MLP.
//!
//! For every (layer, kv-head) pair a two-layer network maps the concatenated
//! pre-/post-rotary key of a token to an admission score in `(0, 1)`:
//!
//! ```text
//! g = sigmoid(w2 · gelu(W1 · [k; rope(k)] + b1) + b2)
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gelu, gelu_grad, sigmoid, Matrix, SeededRng};

/// Parameters of a single gate (one (layer, kv-head) pair).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGate {
    /// `[hidden x 2*head_dim]`
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// Output projection, one weight per hidden unit.
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl HeadGate {
    pub fn zeros(hidden: usize, feature_dim: usize) -> Self {
        Self {
            w1: Matrix::zeros(hidden, feature_dim),
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
        }
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn num_params(&self) -> usize {
        self.w1.data().len() + self.b1.len() + self.w2.len() + 1
    }

    /// Parameters in (W1, b1, W2, b2) order.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.w1.data());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.push(self.b2);
    }

    fn load_flat(&mut self, src: &[f64]) -> usize {
        let n1 = self.w1.data().len();
        let h = self.b1.len();
        self.w1.data_mut().copy_from_slice(&src[..n1]);
        self.b1.copy_from_slice(&src[n1..n1 + h]);
        self.w2.copy_from_slice(&src[n1 + h..n1 + 2 * h]);
        self.b2 = src[n1 + 2 * h];
        n1 + 2 * h + 1
    }
}

/// Gate parameters for every (layer, kv-head), layer-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    layers: usize,
    kv_heads: usize,
    head_dim: usize,
    hidden: usize,
    gates: Vec<HeadGate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateInit {
    pub weight_std: f64,
    pub out_bias: f64,
}

impl Default for GateInit {
    /// Small weights with `b2 = 2` so the initial gate admits almost everything (g ≈ 0.88).
    fn default() -> Self {
        Self {
            weight_std: 0.02,
            out_bias: 2.0,
        }
    }
}

impl GateParams {
    pub fn zeros(layers: usize, kv_heads: usize, head_dim: usize, hidden: usize) -> Self {
        let gates = (0..layers * kv_heads)
            .map(|_| HeadGate::zeros(hidden, 2 * head_dim))
            .collect();
        Self {
            layers,
            kv_heads,
            head_dim,
            hidden,
            gates,
        }
    }

    pub fn init(
        layers: usize,
        kv_heads: usize,
        head_dim: usize,
        hidden: usize,
        init: GateInit,
        rng: &mut SeededRng,
    ) -> Self {
        let mut p = Self::zeros(layers, kv_heads, head_dim, hidden);
        for g in &mut p.gates {
            g.w1 = Matrix::gaussian(hidden, 2 * head_dim, init.weight_std, rng);
            g.w2 = rng.gaussian_vec(hidden, init.weight_std);
            g.b2 = init.out_bias;
        }
        p
    }

    /// Every gate outputs `sigmoid(b2)` regardless of input.
    pub fn constant(
        layers: usize,
        kv_heads: usize,
        head_dim: usize,
        hidden: usize,
        b2: f64,
    ) -> Self {
        let mut p = Self::zeros(layers, kv_heads, head_dim, hidden);
        for g in &mut p.gates {
            g.b2 = b2;
        }
        p
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn kv_heads(&self) -> usize {
        self.kv_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn head(&self, layer: usize, head: usize) -> &HeadGate {
        &self.gates[layer * self.kv_heads + head]
    }

    pub fn head_mut(&mut self, layer: usize, head: usize) -> &mut HeadGate {
        &mut self.gates[layer * self.kv_heads + head]
    }

    pub fn heads(&self) -> &[HeadGate] {
        &self.gates
    }

    pub fn num_params(&self) -> usize {
        self.gates.iter().map(HeadGate::num_params).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for g in &self.gates {
            g.flatten_into(&mut out);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} flat values for {} gate parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut at = 0;
        for g in &mut self.gates {
            at += g.load_flat(&flat[at..]);
        }
        Ok(())
    }

    /// Same shape, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layers, self.kv_heads, self.head_dim, self.hidden)
    }

    pub fn same_shape(&self, other: &GateParams) -> bool {
        (self.layers, self.kv_heads, self.head_dim, self.hidden)
            == (other.layers, other.kv_heads, other.head_dim, other.hidden)
    }

    /// `self += scale * other`
    pub fn axpy(&mut self, scale: f64, other: &GateParams) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.gates.iter_mut().zip(&other.gates) {
            for (x, y) in a.w1.data_mut().iter_mut().zip(b.w1.data()) {
                *x += scale * y;
            }
            for (x, y) in a.b1.iter_mut().zip(&b.b1) {
                *x += scale * y;
            }
            for (x, y) in a.w2.iter_mut().zip(&b.w2) {
                *x += scale * y;
            }
            a.b2 += scale * b.b2;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.gates {
            g.w1.data_mut().iter_mut().for_each(|x| *x *= s);
            g.b1.iter_mut().for_each(|x| *x *= s);
            g.w2.iter_mut().for_each(|x| *x *= s);
            g.b2 *= s;
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.to_flat().iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|x| x.is_finite())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        for v in [
            FORMAT_VERSION,
            self.layers as u32,
            self.kv_heads as u32,
            self.head_dim as u32,
            self.hidden as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for x in self.to_flat() {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let mut header = [0u32; 5];
        for h in &mut header {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *h = u32::from_le_bytes(b);
        }
        let [version, layers, kv_heads, head_dim, hidden] = header;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mut p = Self::zeros(
            layers as usize,
            kv_heads as usize,
            head_dim as usize,
            hidden as usize,
        );
        let mut flat = vec![0.0; p.num_params()];
        for x in &mut flat {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *x = f64::from_le_bytes(b);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", rest.len())));
        }
        p.set_flat(&flat)?;
        Ok(p)
    }
}

const MAGIC: &[u8; 4] = b"WGKV";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateScore {
    pub value: f64,
    pub layer: usize,
    pub head: usize,
    pub position: usize,
}

/// Admission threshold τ, strictly inside `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Threshold(f64);

impl Threshold {
    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau < 1.0 {
            Ok(Self(tau))
        } else {
            Err(Error::InvalidArgument(format!(
                "threshold must lie in (0, 1), got {tau}"
            )))
        }
    }

    pub fn tau(self) -> f64 {
        self.0
    }

    /// `g >= tau` admits; the boundary is inclusive.
    #[inline]
    pub fn admits(self, g: f64) -> bool {
        g >= self.0
    }
}

impl Default for Threshold {
    fn default() -> Self {
        Self(0.1)
    }
}

impl TryFrom<f64> for Threshold {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Threshold> for f64 {
    fn from(t: Threshold) -> f64 {
        t.0
    }
}

pub fn build_gate_feature(k_pre: &[f64], k_post: &[f64]) -> Result<Vec<f64>> {
    if k_pre.len() != k_post.len() {
        return Err(Error::Shape(format!(
            "pre-rope key length {} vs post-rope {}",
            k_pre.len(),
            k_post.len()
        )));
    }
    let mut x = Vec::with_capacity(2 * k_pre.len());
    x.extend_from_slice(k_pre);
    x.extend_from_slice(k_post);
    Ok(x)
}

/// Intermediate activations of one gate evaluation.
#[derive(Debug, Clone)]
pub struct GateActivations {
    pub pre_act: Vec<f64>,
    pub hidden: Vec<f64>,
    pub g: f64,
}

pub fn gate_forward_detailed(gate: &HeadGate, feature: &[f64]) -> Result<GateActivations> {
    if feature.len() != gate.feature_dim() {
        return Err(Error::Shape(format!(
            "gate feature length {} != {}",
            feature.len(),
            gate.feature_dim()
        )));
    }
    let h = gate.hidden();
    let mut pre_act = Vec::with_capacity(h);
    let mut hidden = Vec::with_capacity(h);
    let mut logit = gate.b2;
    for u in 0..h {
        let a = gate.b1[u]
            + gate
                .w1
                .row(u)
                .iter()
                .zip(feature)
                .map(|(w, x)| w * x)
                .sum::<f64>();
        let z = gelu(a);
        logit += gate.w2[u] * z;
        pre_act.push(a);
        hidden.push(z);
    }
    // keep g strictly inside (0, 1) once the sigmoid saturates in f64
    let g = sigmoid(logit).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
    Ok(GateActivations { pre_act, hidden, g })
}

pub fn gate_forward(
    params: &GateParams,
    layer: usize,
    head: usize,
    position: usize,
    feature: &[f64],
) -> Result<GateScore> {
    let act = gate_forward_detailed(params.head(layer, head), feature)?;
    Ok(GateScore {
        value: act.g,
        layer,
        head,
        position,
    })
}

/// Scores for every row of `keys_pre`/`keys_post`; row `t` sits at position `offset + t`.
pub fn gate_forward_batch(
    params: &GateParams,
    layer: usize,
    head: usize,
    offset: usize,
    keys_pre: &Matrix,
    keys_post: &Matrix,
) -> Result<Vec<GateScore>> {
    if keys_pre.rows() != keys_post.rows() || keys_pre.cols() != keys_post.cols() {
        return Err(Error::Shape(format!(
            "pre-rope keys {}x{} vs post-rope {}x{}",
            keys_pre.rows(),
            keys_pre.cols(),
            keys_post.rows(),
            keys_post.cols()
        )));
    }
    (0..keys_pre.rows())
        .map(|t| {
            let x = build_gate_feature(keys_pre.row(t), keys_post.row(t))?;
            gate_forward(params, layer, head, offset + t, &x)
        })
        .collect()
}

pub fn binarize(scores: &[GateScore], threshold: Threshold) -> Vec<bool> {
    scores.iter().map(|s| threshold.admits(s.value)).collect()
}

/// Gradient of one gate's output with respect to its parameters and its input.
#[derive(Debug, Clone)]
pub struct GateGrad {
    pub params: HeadGate,
    pub feature: Vec<f64>,
}

/// Backpropagate `upstream = dL/dg` through one gate.
pub fn gate_backward(gate: &HeadGate, feature: &[f64], upstream: f64) -> Result<GateGrad> {
    let act = gate_forward_detailed(gate, feature)?;
    let mut params = HeadGate::zeros(gate.hidden(), gate.feature_dim());
    let mut dfeature = vec![0.0; feature.len()];
    gate_backward_accumulate(gate, feature, &act, upstream, &mut params, &mut dfeature);
    Ok(GateGrad {
        params,
        feature: dfeature,
    })
}

/// Accumulating form of [`gate_backward`] over precomputed activations.
pub fn gate_backward_accumulate(
    gate: &HeadGate,
    feature: &[f64],
    act: &GateActivations,
    upstream: f64,
    grad: &mut HeadGate,
    dfeature: &mut [f64],
) {
    if upstream == 0.0 {
        return;
    }
    let dlogit = upstream * act.g * (1.0 - act.g);
    grad.b2 += dlogit;
    for u in 0..gate.hidden() {
        grad.w2[u] += dlogit * act.hidden[u];
        let da = dlogit * gate.w2[u] * gelu_grad(act.pre_act[u]);
        if da == 0.0 {
            continue;
        }
        grad.b1[u] += da;
        let w_row = gate.w1.row(u);
        let g_row = grad.w1.row_mut(u);
        for i in 0..feature.len() {
            g_row[i] += da * feature[i];
            dfeature[i] += da * w_row[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{apply_rope, seeded_rng, RopeConfig};

    fn random_gate(rng: &mut SeededRng, hidden: usize, fdim: usize, std: f64) -> HeadGate {
        HeadGate {
            w1: Matrix::gaussian(hidden, fdim, std, rng),
            b1: rng.gaussian_vec(hidden, std),
            w2: rng.gaussian_vec(hidden, std),
            b2: std * rng.gaussian(),
        }
    }

    fn hand_forward(g: &HeadGate, x: &[f64]) -> f64 {
        let mut s = g.b2;
        for u in 0..g.hidden() {
            let mut a = g.b1[u];
            for i in 0..x.len() {
                a += g.w1.get(u, i) * x[i];
            }
            let phi = 0.5 * (1.0 + libm::erf(a / 2f64.sqrt()));
            s += g.w2[u] * a * phi;
        }
        1.0 / (1.0 + (-s).exp())
    }

    #[test]
    fn feature_is_concatenation() {
        assert_eq!(
            build_gate_feature(&[1.0, 2.0], &[3.0, 4.0]).unwrap(),
            vec![1.0, 2.0, 3.0, 4.0]
        );
        assert!(build_gate_feature(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn feature_halves_follow_rope() {
        let cfg = RopeConfig::with_default_base(8).unwrap();
        let mut rng = seeded_rng(9);
        let k = rng.gaussian_vec(8, 1.0);
        let x0 = build_gate_feature(&k, &apply_rope(&k, 0, &cfg).unwrap()).unwrap();
        assert_eq!(&x0[..8], &x0[8..]);
        let x5 = build_gate_feature(&k, &apply_rope(&k, 5, &cfg).unwrap()).unwrap();
        assert_eq!(&x5[8..], apply_rope(&k, 5, &cfg).unwrap().as_slice());
    }

    #[test]
    fn zero_gate_is_half() {
        let p = GateParams::zeros(1, 1, 4, 4);
        let s = gate_forward(&p, 0, 0, 3, &[0.3; 8]).unwrap();
        assert_eq!(s.value, 0.5);
        assert_eq!((s.layer, s.head, s.position), (0, 0, 3));
    }

    #[test]
    fn saturated_bias_admits() {
        let p = GateParams::constant(1, 1, 4, 4, 20.0);
        let s = gate_forward(&p, 0, 0, 0, &[1.0; 8]).unwrap();
        assert!(s.value > 1.0 - 1e-8);
    }

    #[test]
    fn forward_matches_hand_evaluation() {
        let mut rng = seeded_rng(21);
        for _ in 0..20 {
            let g = random_gate(&mut rng, 6, 8, 0.7);
            let x = rng.gaussian_vec(8, 1.0);
            let got = gate_forward_detailed(&g, &x).unwrap().g;
            assert!((got - hand_forward(&g, &x)).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_rejects_bad_feature() {
        let p = GateParams::zeros(1, 1, 4, 4);
        assert!(gate_forward(&p, 0, 0, 0, &[0.0; 7]).is_err());
    }

    #[test]
    fn batch_matches_scalar_loop() {
        let mut rng = seeded_rng(4);
        let p = GateParams::init(
            1,
            2,
            4,
            5,
            GateInit {
                weight_std: 0.5,
                out_bias: 0.1,
            },
            &mut rng,
        );
        let pre = Matrix::gaussian(8, 4, 1.0, &mut rng);
        let post = Matrix::gaussian(8, 4, 1.0, &mut rng);
        let batch = gate_forward_batch(&p, 0, 1, 10, &pre, &post).unwrap();
        assert_eq!(batch.len(), 8);
        for t in 0..8 {
            let x = build_gate_feature(pre.row(t), post.row(t)).unwrap();
            let s = gate_forward(&p, 0, 1, 10 + t, &x).unwrap();
            assert_eq!(batch[t], s);
        }
        let one = gate_forward_batch(&p, 0, 0, 0, &pre.col_block(0, 4), &post).unwrap();
        assert_eq!(one.len(), 8);
        let dup = Matrix::from_rows(&[pre.row(0).to_vec(), pre.row(0).to_vec()]).unwrap();
        let dup_post = Matrix::from_rows(&[post.row(0).to_vec(), post.row(0).to_vec()]).unwrap();
        let d = gate_forward_batch(&p, 0, 0, 0, &dup, &dup_post).unwrap();
        assert_eq!(d[0].value, d[1].value);
        assert!(gate_forward_batch(&p, 0, 0, 0, &pre, &dup_post).is_err());
    }

    fn score(v: f64) -> GateScore {
        GateScore {
            value: v,
            layer: 0,
            head: 0,
            position: 0,
        }
    }

    #[test]
    fn binarize_boundary_admits() {
        let tau = Threshold::new(0.1).unwrap();
        let s: Vec<_> = [0.05, 0.1, 0.95].into_iter().map(score).collect();
        assert_eq!(binarize(&s, tau), vec![false, true, true]);
        let half = Threshold::new(0.5).unwrap();
        let s: Vec<_> = [0.5; 4].into_iter().map(score).collect();
        assert!(binarize(&s, half).into_iter().all(|b| b));
        assert!(Threshold::new(0.0).is_err());
        assert!(Threshold::new(1.0).is_err());
    }

    #[test]
    fn backward_zero_upstream_is_zero() {
        let mut rng = seeded_rng(2);
        let g = random_gate(&mut rng, 4, 6, 1.0);
        let x = rng.gaussian_vec(6, 1.0);
        let grad = gate_backward(&g, &x, 0.0).unwrap();
        let mut flat = Vec::new();
        grad.params.flatten_into(&mut flat);
        assert!(flat.iter().all(|&v| v == 0.0));
        assert!(grad.feature.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_b2_is_sigmoid_derivative() {
        let mut rng = seeded_rng(12);
        let g = random_gate(&mut rng, 4, 6, 1.0);
        let x = rng.gaussian_vec(6, 1.0);
        let out = gate_forward_detailed(&g, &x).unwrap().g;
        let grad = gate_backward(&g, &x, 1.7).unwrap();
        assert!((grad.params.b2 - 1.7 * out * (1.0 - out)).abs() < 1e-15);
    }

    /// Relative error, denominator floored at 1e-4.
    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = seeded_rng(77);
        let h = 1e-5;
        for _ in 0..100 {
            let gate = random_gate(&mut rng, 5, 8, 0.6);
            let x = rng.gaussian_vec(8, 1.0);
            let up = rng.gaussian();
            let grad = gate_backward(&gate, &x, up).unwrap();
            let mut flat = Vec::new();
            gate.flatten_into(&mut flat);
            let mut analytic = Vec::new();
            grad.params.flatten_into(&mut analytic);
            for i in 0..flat.len() {
                let mut p = gate.clone();
                let mut m = gate.clone();
                let mut fp = flat.clone();
                let mut fm = flat.clone();
                fp[i] += h;
                fm[i] -= h;
                p.load_flat(&fp);
                m.load_flat(&fm);
                let fd = up * (hand_forward(&p, &x) - hand_forward(&m, &x)) / (2.0 * h);
                assert!(
                    rel_err(fd, analytic[i]) < 1e-6,
                    "param {i}: {fd} vs {}",
                    analytic[i]
                );
            }
            for i in 0..x.len() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = up * (hand_forward(&gate, &xp) - hand_forward(&gate, &xm)) / (2.0 * h);
                assert!(rel_err(fd, grad.feature[i]) < 1e-6);
            }
        }
    }

    #[test]
    fn per_head_independence() {
        let mut rng = seeded_rng(31);
        let mut p = GateParams::init(
            2,
            3,
            4,
            4,
            GateInit {
                weight_std: 0.5,
                out_bias: 0.0,
            },
            &mut rng,
        );
        let feats: Vec<Vec<f64>> = (0..5).map(|_| rng.gaussian_vec(8, 1.0)).collect();
        let eval = |p: &GateParams| -> Vec<f64> {
            let mut v = Vec::new();
            for l in 0..2 {
                for h in 0..3 {
                    for f in &feats {
                        v.push(gate_forward(p, l, h, 0, f).unwrap().value);
                    }
                }
            }
            v
        };
        let before = eval(&p);
        p.head_mut(1, 2).b2 += 3.0;
        p.head_mut(1, 2).w1.data_mut()[0] -= 1.0;
        let after = eval(&p);
        for (idx, (a, b)) in before.iter().zip(&after).enumerate() {
            let head_index = idx / feats.len();
            if head_index == 5 {
                assert_ne!(a, b);
            } else {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn binary_format_round_trip_and_layout() {
        let mut rng = seeded_rng(8);
        let p = GateParams::init(2, 2, 4, 3, GateInit::default(), &mut rng);
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"WGKV");
        let header: Vec<u32> = buf[4..24]
            .chunks(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(header, vec![1, 2, 2, 4, 3]);
        assert_eq!(buf.len(), 24 + 8 * p.num_params());
        // first float is W1[0,0] of (layer 0, head 0); last is b2 of (layer 1, head 1)
        let first = f64::from_le_bytes(buf[24..32].try_into().unwrap());
        assert_eq!(first, p.head(0, 0).w1.get(0, 0));
        let last = f64::from_le_bytes(buf[buf.len() - 8..].try_into().unwrap());
        assert_eq!(last, p.head(1, 1).b2);
        let back = GateParams::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, p);
        buf[0] = b'X';
        assert!(GateParams::read_from(buf.as_slice()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn gate_strictly_inside_unit_interval(
                seed in 0u64..10_000,
                std in 0.01f64..3.0,
                b2 in -30.0f64..30.0,
            ) {
                let mut rng = seeded_rng(seed);
                let mut g = random_gate(&mut rng, 4, 6, std);
                g.b2 = b2;
                let x = rng.gaussian_vec(6, 1.0);
                let v = gate_forward_detailed(&g, &x).unwrap().g;
                prop_assert!(v > 0.0 && v < 1.0);
            }

            #[test]
            fn binarize_is_monotone(
                scores in prop::collection::vec(0.0f64..1.0, 1..30),
                bump in 0.0f64..0.5,
                tau in 0.01f64..0.99,
            ) {
                let t = Threshold::new(tau).unwrap();
                let s: Vec<_> = scores.iter().copied().map(score).collect();
                let raised: Vec<_> = scores.iter().map(|v| score((v + bump).min(1.0))).collect();
                let a = binarize(&s, t);
                let b = binarize(&raised, t);
                for i in 0..a.len() {
                    prop_assert!(!a[i] || b[i]);
                    prop_assert_eq!(a[i], scores[i] >= tau);
                }
            }
        }
    }
}
