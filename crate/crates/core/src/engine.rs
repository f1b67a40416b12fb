//! Prefill/decode orchestration over the paged dual cache.
//!
//! Every policy is expressed as an admission score per (layer, kv-head,
//! position): learned gates for `wgkv`, and constant 1/0 scores for the
//! baselines. Inference always uses hard routing: a key is visible to a
//! query iff it lies in the query's local window or its score clears `tau`.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attention::{
    attn_dense, attn_ragged, attn_vertical_slash, AttnInput, KvSlice, OpCounter, VsMask,
};
use crate::error::{Error, Result};
use crate::gating::{build_gate_feature, gate_forward, GateParams, Threshold};
use crate::kvstore::{cache_stats, CacheStats, HeadCache, KvPool, DEFAULT_PAGE_SIZE};
use crate::model::{argmax, LayerQkv, ToyModel};
use crate::numerics::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Full,
    Wgkv,
    LocalSink,
    StaticHeads,
    WgkvPlusTopk,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Full => "full",
            PolicyKind::Wgkv => "wgkv",
            PolicyKind::LocalSink => "local_sink",
            PolicyKind::StaticHeads => "static_heads",
            PolicyKind::WgkvPlusTopk => "wgkv_plus_topk",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => PolicyKind::Full,
            "wgkv" => PolicyKind::Wgkv,
            "local_sink" => PolicyKind::LocalSink,
            "static_heads" => PolicyKind::StaticHeads,
            "wgkv_plus_topk" => PolicyKind::WgkvPlusTopk,
            other => return Err(Error::InvalidArgument(format!("unknown policy {other:?}"))),
        })
    }

    fn uses_gates(self) -> bool {
        matches!(self, PolicyKind::Wgkv | PolicyKind::WgkvPlusTopk)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub window: usize,
    pub sink: usize,
    pub threshold: Threshold,
    /// `layers * kv_heads` flags, layer-major; `true` marks a retrieval head.
    #[serde(default)]
    pub retrieval_heads: Vec<bool>,
    /// Pages kept per head by top-k selection; `None` keeps all.
    #[serde(default)]
    pub topk_budget: Option<usize>,
    /// Replace learned gates by score 1 at positions `p % period == 0`, 0 elsewhere.
    #[serde(default)]
    pub forced_admit_period: Option<usize>,
    pub page_size: usize,
    /// Longest sequence the pool is sized for (worst case, all admitted).
    pub max_tokens: usize,
    /// Fixed pool size; exhaustion is then an error rather than a sizing choice.
    #[serde(default)]
    pub pool_pages: Option<usize>,
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind, window: usize) -> Self {
        Self {
            kind,
            window,
            sink: 0,
            threshold: Threshold::default(),
            retrieval_heads: Vec::new(),
            topk_budget: None,
            forced_admit_period: None,
            page_size: DEFAULT_PAGE_SIZE,
            max_tokens: 2048,
            pool_pages: None,
        }
    }

    pub fn full(window: usize) -> Self {
        Self::new(PolicyKind::Full, window)
    }

    pub fn wgkv(window: usize, threshold: Threshold) -> Self {
        Self {
            threshold,
            ..Self::new(PolicyKind::Wgkv, window)
        }
    }

    pub fn local_sink(window: usize, sink: usize) -> Self {
        Self {
            sink,
            ..Self::new(PolicyKind::LocalSink, window)
        }
    }

    pub fn static_heads(window: usize, retrieval_heads: Vec<bool>) -> Self {
        Self {
            retrieval_heads,
            ..Self::new(PolicyKind::StaticHeads, window)
        }
    }

    pub fn wgkv_plus_topk(window: usize, threshold: Threshold, budget: Option<usize>) -> Self {
        Self {
            threshold,
            topk_budget: budget,
            ..Self::new(PolicyKind::WgkvPlusTopk, window)
        }
    }

    pub fn validate(&self, model: &ToyModel) -> Result<()> {
        if self.window == 0 {
            return Err(Error::InvalidArgument("window must be at least 1".into()));
        }
        if self.page_size == 0 {
            return Err(Error::InvalidArgument("page size must be positive".into()));
        }
        if self.topk_budget == Some(0) {
            return Err(Error::InvalidArgument(
                "top-k budget must be at least 1".into(),
            ));
        }
        if self.forced_admit_period == Some(0) {
            return Err(Error::InvalidArgument(
                "forced admission period must be positive".into(),
            ));
        }
        let cfg = model.config();
        if self.kind == PolicyKind::StaticHeads
            && self.retrieval_heads.len() != cfg.layers * cfg.kv_heads
        {
            return Err(Error::InvalidArgument(format!(
                "retrieval bitmap has {} entries, expected {}",
                self.retrieval_heads.len(),
                cfg.layers * cfg.kv_heads
            )));
        }
        Ok(())
    }

    /// Admission score of a token given its learned gate (if computed).
    fn score(
        &self,
        layer: usize,
        head: usize,
        kv_heads: usize,
        position: usize,
        gate: Option<f64>,
    ) -> f64 {
        let bit = |b: bool| if b { 1.0 } else { 0.0 };
        match self.kind {
            PolicyKind::Full => 1.0,
            PolicyKind::LocalSink => bit(position < self.sink),
            PolicyKind::StaticHeads => bit(self.retrieval_heads[layer * kv_heads + head]),
            PolicyKind::Wgkv | PolicyKind::WgkvPlusTopk => match self.forced_admit_period {
                Some(p) => bit(position.is_multiple_of(p)),
                None => gate.expect("learned policy without gate"),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub score_evals: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: PolicyConfig,
    /// Step 0 is the prefill; step `s > 0` is the `s`-th decode step.
    pub per_step: Vec<StepRecord>,
    pub cache: CacheStats,
    pub outputs: Vec<u32>,
    pub per_head_admitted: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
}

impl RunReport {
    pub fn total_score_evals(&self) -> u64 {
        self.per_step.iter().map(|s| s.score_evals).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,score_evals")?;
        for s in &self.per_step {
            writeln!(w, "{},{}", s.step, s.score_evals)?;
        }
        Ok(())
    }
}

/// Caches and bookkeeping of one generation.
#[derive(Debug, Clone)]
pub struct Session {
    policy: PolicyConfig,
    pool: KvPool,
    caches: Vec<HeadCache>,
    kv_heads: usize,
    tokens: Vec<u32>,
    /// Admission score per (layer, kv-head), indexed by position.
    scores: Vec<Vec<f64>>,
    report: RunReport,
}

impl Session {
    fn new(model: &ToyModel, policy: &PolicyConfig, prompt_len: usize) -> Result<Self> {
        policy.validate(model)?;
        let cfg = model.config();
        let heads = cfg.layers * cfg.kv_heads;
        let capacity = policy.pool_pages.unwrap_or_else(|| {
            KvPool::worst_case_pages(
                heads,
                policy.window,
                policy.max_tokens.max(prompt_len),
                policy.page_size,
            )
        });
        let pool = KvPool::new(capacity, policy.page_size, cfg.head_dim)?;
        let caches = (0..cfg.layers)
            .flat_map(|l| (0..cfg.kv_heads).map(move |h| (l, h)))
            .map(|(l, h)| HeadCache::new(l, h, policy.window))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            policy: policy.clone(),
            pool,
            caches,
            kv_heads: cfg.kv_heads,
            tokens: Vec::new(),
            scores: vec![Vec::new(); heads],
            report: RunReport {
                config: policy.clone(),
                per_step: Vec::new(),
                cache: CacheStats::default(),
                outputs: Vec::new(),
                per_head_admitted: Vec::new(),
                loss: None,
            },
        })
    }

    pub fn policy(&self) -> &PolicyConfig {
        &self.policy
    }

    pub fn pool(&self) -> &KvPool {
        &self.pool
    }

    pub fn caches(&self) -> &[HeadCache] {
        &self.caches
    }

    pub fn cache(&self, layer: usize, head: usize) -> &HeadCache {
        &self.caches[layer * self.kv_heads + head]
    }

    /// Every token processed so far (prompt plus decoded inputs).
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn scores(&self, layer: usize, head: usize) -> &[f64] {
        &self.scores[layer * self.kv_heads + head]
    }

    /// Recorded hard admission bits of one head.
    pub fn admitted(&self, layer: usize, head: usize) -> Vec<bool> {
        let tau = self.policy.threshold;
        self.scores(layer, head)
            .iter()
            .map(|&g| tau.admits(g))
            .collect()
    }

    pub fn report(&self) -> &RunReport {
        &self.report
    }

    pub fn into_report(self) -> RunReport {
        self.report
    }

    pub fn stats(&self) -> CacheStats {
        cache_stats(&self.caches, &self.pool)
    }

    fn refresh_report(&mut self) {
        self.report.cache = self.stats();
        self.report.per_head_admitted = self
            .caches
            .iter()
            .map(|c| {
                if c.tokens_seen() == 0 {
                    0.0
                } else {
                    c.global_len() as f64 / c.tokens_seen() as f64
                }
            })
            .collect();
    }

    /// Release all pages back to the pool.
    pub fn release(&mut self) {
        for c in &mut self.caches {
            c.release(&mut self.pool);
        }
    }
}

fn learned_gate(
    gates: &GateParams,
    layer: usize,
    head: usize,
    position: usize,
    k_pre: &[f64],
    k_rope: &[f64],
) -> Result<f64> {
    let x = build_gate_feature(k_pre, k_rope)?;
    Ok(gate_forward(gates, layer, head, position, &x)?.value)
}

fn check_gate_shape(model: &ToyModel, gates: &GateParams) -> Result<()> {
    let cfg = model.config();
    if gates.layers() != cfg.layers
        || gates.kv_heads() != cfg.kv_heads
        || gates.head_dim() != cfg.head_dim
    {
        return Err(Error::Shape(format!(
            "gates for {}x{} heads of dim {}, model has {}x{} of dim {}",
            gates.layers(),
            gates.kv_heads(),
            gates.head_dim(),
            cfg.layers,
            cfg.kv_heads,
            cfg.head_dim
        )));
    }
    Ok(())
}

/// Admission scores of layer `l` for every row of `qkv`, one vector per kv head.
fn layer_scores(
    model: &ToyModel,
    gates: &GateParams,
    policy: &PolicyConfig,
    l: usize,
    qkv: &LayerQkv,
) -> Result<Vec<Vec<f64>>> {
    let cfg = model.config();
    (0..cfg.kv_heads)
        .map(|h| {
            (0..qkv.k_pre[h].rows())
                .map(|r| {
                    let pos = qkv.offset + r;
                    let g = if policy.kind.uses_gates() && policy.forced_admit_period.is_none() {
                        Some(learned_gate(
                            gates,
                            l,
                            h,
                            pos,
                            qkv.k_pre[h].row(r),
                            qkv.k_rope[h].row(r),
                        )?)
                    } else {
                        None
                    };
                    Ok(policy.score(l, h, cfg.kv_heads, pos, g))
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct PrefillOutput {
    pub hidden: Matrix,
    pub logits: Matrix,
}

/// Sparse prefill: vertical-slash attention, then initial cache population.
pub fn prefill(
    model: &ToyModel,
    gates: &GateParams,
    tokens: &[u32],
    policy: &PolicyConfig,
) -> Result<(Session, PrefillOutput)> {
    check_gate_shape(model, gates)?;
    model.check_tokens(tokens)?;
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("empty prompt".into()));
    }
    let mut session = Session::new(model, policy, tokens.len())?;
    let cfg = *model.config();
    let mut counter = OpCounter::default();
    let out = model.forward_with(tokens, 0, |l, qkv| {
        let scores = layer_scores(model, gates, policy, l, qkv)?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let kv = cfg.kv_head_of(h);
            let input = AttnInput::new(&qkv.q_rope[h], &qkv.k_rope[kv], &qkv.v[kv], 0)?;
            let o = if policy.kind == PolicyKind::Full {
                attn_dense(&input, &mut counter)?
            } else {
                let mask = VsMask::new(
                    policy.window,
                    scores[kv]
                        .iter()
                        .map(|&g| policy.threshold.admits(g))
                        .collect(),
                )?;
                attn_vertical_slash(&input, &mask, &mut counter)?
            };
            heads.push(o);
        }
        for (h, sc) in scores.into_iter().enumerate() {
            let idx = l * cfg.kv_heads + h;
            session.caches[idx].prefill_populate(
                &mut session.pool,
                &qkv.k_rope[h],
                &qkv.v[h],
                &sc,
                policy.threshold,
            )?;
            session.scores[idx] = sc;
        }
        Ok(model.concat_heads(&heads))
    })?;
    session.tokens = tokens.to_vec();
    session.report.per_step.push(StepRecord {
        step: 0,
        score_evals: counter.score_evals,
    });
    session.refresh_report();
    Ok((
        session,
        PrefillOutput {
            hidden: out.hidden,
            logits: out.logits,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub logits: Vec<f64>,
    pub hidden: Vec<f64>,
    pub score_evals: u64,
}

/// Top-k page selection over a head's global region.
///
/// Pages are scored by the maximum `q · k` over their occupied slots; the
/// best `budget` pages are kept (ties favour older pages) and returned in
/// position order. The local region is always kept and is not part of the result.
pub fn select_topk_pages(q: &[f64], cache: &HeadCache, pool: &KvPool, budget: usize) -> KvSlice {
    let ps = pool.page_size();
    let n = cache.global_pages();
    let mut scored: Vec<(f64, usize)> = (0..n)
        .map(|idx| {
            let (page, used) = cache.global_page(idx, ps);
            let best = (0..used)
                .map(|o| dot(q, pool.key(page, o)))
                .fold(f64::NEG_INFINITY, f64::max);
            (best, idx)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut keep: Vec<usize> = scored
        .into_iter()
        .take(budget)
        .map(|(_, idx)| idx)
        .collect();
    keep.sort_unstable();
    let mut out = KvSlice::default();
    for idx in keep {
        let (page, used) = cache.global_page(idx, ps);
        for o in 0..used {
            out.push(
                pool.key(page, o).to_vec(),
                pool.value(page, o).to_vec(),
                pool.position(page, o),
            );
        }
    }
    out
}

/// One autoregressive step: compute the new token's K/V/score per head,
/// write it through the ring (lazy promotion), then attend over global ‖ local.
pub fn decode_step(
    model: &ToyModel,
    gates: &GateParams,
    session: &mut Session,
    token: u32,
    policy: &PolicyConfig,
) -> Result<StepOutput> {
    if *policy != session.policy {
        return Err(Error::PolicyMismatch {
            cached: session.policy.kind.to_string(),
            requested: policy.kind.to_string(),
        });
    }
    check_gate_shape(model, gates)?;
    let cfg = *model.config();
    let position = session.tokens.len();
    let mut counter = OpCounter::default();
    let out = model.forward_with(&[token], position, |l, qkv| {
        let scores = layer_scores(model, gates, policy, l, qkv)?;
        for (h, sc) in scores.into_iter().enumerate() {
            let idx = l * cfg.kv_heads + h;
            let score = sc[0];
            session.caches[idx].local_write(
                &mut session.pool,
                qkv.k_rope[h].row(0),
                qkv.v[h].row(0),
                score,
                position,
                policy.threshold,
            )?;
            session.scores[idx].push(score);
        }
        let mut heads = Vec::with_capacity(cfg.heads);
        let gathered: Vec<(KvSlice, KvSlice)> = (0..cfg.kv_heads)
            .map(|h| session.caches[l * cfg.kv_heads + h].gather(&session.pool))
            .collect();
        for h in 0..cfg.heads {
            let kv = cfg.kv_head_of(h);
            let q = qkv.q_rope[h].row(0);
            let (global, local) = &gathered[kv];
            let o = match (policy.kind, policy.topk_budget) {
                (PolicyKind::WgkvPlusTopk, Some(budget)) => {
                    let cache = &session.caches[l * cfg.kv_heads + kv];
                    let selected = select_topk_pages(q, cache, &session.pool, budget);
                    attn_ragged(q, local, &selected, &mut counter)?
                }
                _ => attn_ragged(q, local, global, &mut counter)?,
            };
            heads.push(Matrix::from_vec(1, cfg.head_dim, o)?);
        }
        Ok(model.concat_heads(&heads))
    })?;
    session.tokens.push(token);
    let step = session.report.per_step.len();
    session.report.per_step.push(StepRecord {
        step,
        score_evals: counter.score_evals,
    });
    session.refresh_report();
    Ok(StepOutput {
        logits: out.logits.row(0).to_vec(),
        hidden: out.hidden.row(0).to_vec(),
        score_evals: counter.score_evals,
    })
}

/// Greedy generation. Returns the prompt followed by `steps` generated ids;
/// every generated id is fed back through [`decode_step`].
pub fn generate(
    model: &ToyModel,
    gates: &GateParams,
    prompt: &[u32],
    steps: usize,
    policy: &PolicyConfig,
) -> Result<(Vec<u32>, RunReport)> {
    let (session, ids, _) = generate_session(model, gates, prompt, steps, policy)?;
    Ok((ids, session.into_report()))
}

/// [`generate`] that also returns the live session and every step's logits
/// (row 0 is the prefill's last row).
pub fn generate_session(
    model: &ToyModel,
    gates: &GateParams,
    prompt: &[u32],
    steps: usize,
    policy: &PolicyConfig,
) -> Result<(Session, Vec<u32>, Vec<Vec<f64>>)> {
    let (mut session, pre) = prefill(model, gates, prompt, policy)?;
    let mut ids = prompt.to_vec();
    let mut logits = vec![pre.logits.row(pre.logits.rows() - 1).to_vec()];
    for _ in 0..steps {
        let next = argmax(logits.last().expect("non-empty"));
        ids.push(next);
        session.report.outputs.push(next);
        let out = decode_step(model, gates, &mut session, next, policy)?;
        logits.push(out.logits);
    }
    Ok((session, ids, logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::attn_dense;
    use crate::gating::GateInit;
    use crate::kvstore::audit_pages;
    use crate::model::ModelConfig;
    use crate::numerics::seeded_rng;
    use crate::oracle::{audit_cache, dense_masked_run, oracle_generate};

    fn model() -> ToyModel {
        ToyModel::random(ModelConfig::default(), 11).unwrap()
    }

    fn prompt(seed: u64, n: usize) -> Vec<u32> {
        let mut rng = seeded_rng(seed);
        (0..n).map(|_| rng.index(0, 64) as u32).collect()
    }

    fn saturated() -> GateParams {
        GateParams::constant(2, 4, 16, 8, 40.0)
    }

    fn random_gates(seed: u64) -> GateParams {
        let init = GateInit {
            weight_std: 0.5,
            out_bias: -0.5,
        };
        GateParams::init(2, 4, 16, 8, init, &mut seeded_rng(seed))
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    fn dense_forward(model: &ToyModel, tokens: &[u32]) -> Matrix {
        let cfg = *model.config();
        model
            .forward_with(tokens, 0, |_, qkv| {
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
            })
            .unwrap()
            .logits
    }

    #[test]
    fn full_policy_matches_dense_and_keeps_everything() {
        let m = model();
        let toks = prompt(1, 40);
        let (session, out) = prefill(&m, &saturated(), &toks, &PolicyConfig::full(8)).unwrap();
        assert_eq!(out.logits, dense_forward(&m, &toks));
        for c in session.caches() {
            assert_eq!(c.resident(), 40);
        }
        assert_eq!(session.report().per_step[0].score_evals, 8 * 40 * 41 / 2);
    }

    #[test]
    fn saturated_wgkv_equals_full() {
        let m = model();
        let toks = prompt(2, 48);
        let (a, _) = generate(&m, &saturated(), &toks, 16, &PolicyConfig::full(8)).unwrap();
        let (sa, _, la) =
            generate_session(&m, &saturated(), &toks, 16, &PolicyConfig::full(8)).unwrap();
        let (sb, b, lb) = generate_session(
            &m,
            &saturated(),
            &toks,
            16,
            &PolicyConfig::wgkv(8, Threshold::default()),
        )
        .unwrap();
        assert_eq!(a, b);
        for (x, y) in la.iter().zip(&lb) {
            assert!(max_diff(x, y) < 1e-10);
        }
        assert_eq!(sa.stats().resident_entries, sb.stats().resident_entries);
    }

    #[test]
    fn wgkv_matches_dense_masked_oracle() {
        let m = model();
        let gates = random_gates(5);
        let policy = PolicyConfig::wgkv(8, Threshold::default());
        let toks = prompt(3, 64);
        let (mut session, out) = prefill(&m, &gates, &toks, &policy).unwrap();
        let oracle = dense_masked_run(&m, &gates, &toks, &policy).unwrap();
        assert!(out.hidden.max_abs_diff(&oracle.hidden) < 1e-10);
        let admitted: usize = (0..2)
            .flat_map(|l| (0..4).map(move |h| (l, h)))
            .map(|(l, h)| session.admitted(l, h).iter().filter(|&&b| b).count())
            .sum();
        assert!(
            admitted > 0 && admitted < 2 * 4 * 64,
            "degenerate gates: {admitted}"
        );

        let mut ids = toks.clone();
        let mut next = argmax(out.logits.row(63));
        for _ in 0..24 {
            ids.push(next);
            let step = decode_step(&m, &gates, &mut session, next, &policy).unwrap();
            let oracle = dense_masked_run(&m, &gates, &ids, &policy).unwrap();
            assert!(max_diff(&step.logits, oracle.logits.row(ids.len() - 1)) < 1e-8);
            for (idx, c) in session.caches().iter().enumerate() {
                let issues = audit_cache(c, session.pool(), &session.scores[idx], &policy);
                assert!(issues.is_empty(), "{issues:?}");
                assert_eq!(session.scores[idx], oracle.scores[idx]);
            }
            audit_pages(session.caches(), session.pool()).unwrap();
            next = argmax(&step.logits);
        }
    }

    #[test]
    fn generate_agrees_with_oracle_ids() {
        let m = model();
        let gates = random_gates(9);
        let policy = PolicyConfig::wgkv(6, Threshold::default());
        let toks = prompt(4, 30);
        let (ids, report) = generate(&m, &gates, &toks, 10, &policy).unwrap();
        assert_eq!(
            ids,
            oracle_generate(&m, &gates, &toks, 10, &policy).unwrap()
        );
        assert_eq!(report.outputs, ids[30..].to_vec());
        assert_eq!(report.per_step.len(), 11);
    }

    #[test]
    fn zero_steps_returns_prompt() {
        let m = model();
        let toks = prompt(5, 12);
        let (ids, report) = generate(
            &m,
            &saturated(),
            &toks,
            0,
            &PolicyConfig::wgkv(4, Threshold::default()),
        )
        .unwrap();
        assert_eq!(ids, toks);
        assert_eq!(report.per_step.len(), 1);
        assert!(report.outputs.is_empty());
    }

    #[test]
    fn zeroed_gates_reduce_to_sliding_window() {
        let m = model();
        let closed = GateParams::constant(2, 4, 16, 8, -40.0);
        let toks = prompt(6, 40);
        let (_, _, a) = generate_session(
            &m,
            &closed,
            &toks,
            8,
            &PolicyConfig::wgkv(8, Threshold::default()),
        )
        .unwrap();
        let (sb, _, b) =
            generate_session(&m, &closed, &toks, 8, &PolicyConfig::local_sink(8, 0)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(max_diff(x, y) < 1e-10);
        }
        for c in sb.caches() {
            assert_eq!((c.global_len(), c.resident()), (0, 8));
        }
    }

    #[test]
    fn local_sink_residency() {
        let m = model();
        let toks = prompt(7, 1000);
        let (session, _) =
            prefill(&m, &saturated(), &toks, &PolicyConfig::local_sink(256, 128)).unwrap();
        for c in session.caches() {
            assert_eq!(c.resident(), 128 + 256);
        }
    }

    #[test]
    fn short_sequence_local_sink_is_full() {
        let m = model();
        let toks = prompt(8, 10);
        let (_, a) = prefill(&m, &saturated(), &toks, &PolicyConfig::local_sink(16, 2)).unwrap();
        assert!(a.logits.max_abs_diff(&dense_forward(&m, &toks)) < 1e-12);
    }

    #[test]
    fn static_heads_bitmap() {
        let m = model();
        let toks = prompt(9, 50);
        let all = PolicyConfig::static_heads(8, vec![true; 8]);
        let (_, a) = prefill(&m, &saturated(), &toks, &all).unwrap();
        assert!(a.logits.max_abs_diff(&dense_forward(&m, &toks)) < 1e-10);

        let none = PolicyConfig::static_heads(8, vec![false; 8]);
        let (_, b) = prefill(&m, &saturated(), &toks, &none).unwrap();
        let (_, c) = prefill(&m, &saturated(), &toks, &PolicyConfig::local_sink(8, 0)).unwrap();
        assert!(b.logits.max_abs_diff(&c.logits) < 1e-10);

        let bitmap = vec![true, false, false, true, false, true, true, false];
        let (session, _) = prefill(
            &m,
            &saturated(),
            &toks,
            &PolicyConfig::static_heads(8, bitmap.clone()),
        )
        .unwrap();
        for (c, &r) in session.caches().iter().zip(&bitmap) {
            assert_eq!(c.resident(), if r { 50 } else { 8 });
        }
        let bad = PolicyConfig::static_heads(8, vec![true; 3]);
        assert!(matches!(
            prefill(&m, &saturated(), &toks, &bad),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn topk_unbounded_is_wgkv() {
        let m = model();
        let gates = random_gates(12);
        let toks = prompt(10, 80);
        let (a, ra) = generate(
            &m,
            &gates,
            &toks,
            12,
            &PolicyConfig::wgkv(8, Threshold::default()),
        )
        .unwrap();
        let (_, _, la) = generate_session(
            &m,
            &gates,
            &toks,
            12,
            &PolicyConfig::wgkv(8, Threshold::default()),
        )
        .unwrap();
        let (_, b, lb) = generate_session(
            &m,
            &gates,
            &toks,
            12,
            &PolicyConfig::wgkv_plus_topk(8, Threshold::default(), None),
        )
        .unwrap();
        let big = PolicyConfig::wgkv_plus_topk(8, Threshold::default(), Some(1000));
        let (c, rc) = generate(&m, &gates, &toks, 12, &big).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(la, lb);
        assert_eq!(ra.per_step, rc.per_step);
    }

    #[test]
    fn topk_budget_bounds_attended_entries() {
        let m = model();
        let gates = random_gates(13);
        let toks = prompt(11, 120);
        let mut prev = u64::MAX;
        for k in [8, 4, 2, 1] {
            let policy = PolicyConfig::wgkv_plus_topk(8, Threshold::default(), Some(k));
            let (session, _, _) = generate_session(&m, &gates, &toks, 6, &policy).unwrap();
            let report = session.report();
            let decode: u64 = report.per_step[1..].iter().map(|s| s.score_evals).sum();
            let bound = (6 * 2 * 4 * (8 + k * 16)) as u64;
            assert!(decode <= bound, "k={k}: {decode} > {bound}");
            assert!(decode <= prev);
            prev = decode;
        }
    }

    #[test]
    fn topk_selects_planted_page() {
        let mut pool = KvPool::new(16, 4, 4).unwrap();
        let mut cache = HeadCache::new(0, 0, 2).unwrap();
        let tau = Threshold::default();
        for p in 0..18 {
            let k = if p == 9 {
                vec![0.0, 0.0, 0.0, 50.0]
            } else {
                vec![1.0, 0.0, 0.0, 0.0]
            };
            cache
                .local_write(&mut pool, &k, &[p as f64; 4], 1.0, p, tau)
                .unwrap();
        }
        assert_eq!(cache.global_pages(), 4);
        let sel = select_topk_pages(&[0.0, 0.0, 0.0, 1.0], &cache, &pool, 1);
        assert_eq!(sel.positions, vec![8, 9, 10, 11]);
        let tie = select_topk_pages(&[0.0, 1.0, 0.0, 0.0], &cache, &pool, 2);
        assert_eq!(tie.positions, (0..8).collect::<Vec<_>>());
        let all = select_topk_pages(&[0.0, 0.0, 0.0, 1.0], &cache, &pool, 4);
        assert_eq!(all.positions, cache.gather(&pool).0.positions);
    }

    #[test]
    fn policy_mismatch_and_bad_tokens() {
        let m = model();
        let toks = prompt(14, 10);
        let (mut session, _) = prefill(&m, &saturated(), &toks, &PolicyConfig::full(4)).unwrap();
        let err = decode_step(
            &m,
            &saturated(),
            &mut session,
            1,
            &PolicyConfig::wgkv(4, Threshold::default()),
        );
        assert!(matches!(err, Err(Error::PolicyMismatch { .. })));
        assert!(matches!(
            prefill(&m, &saturated(), &[3, 64], &PolicyConfig::full(4)),
            Err(Error::UnknownToken { id: 64, .. })
        ));
        assert!(prefill(&m, &saturated(), &[], &PolicyConfig::full(4)).is_err());
        assert!(prefill(&m, &saturated(), &toks, &PolicyConfig::full(0)).is_err());
    }

    #[test]
    fn fixed_pool_exhaustion_is_reported() {
        let m = model();
        let toks = prompt(15, 40);
        let policy = PolicyConfig {
            pool_pages: Some(4),
            ..PolicyConfig::full(8)
        };
        assert!(matches!(
            prefill(&m, &saturated(), &toks, &policy),
            Err(Error::OutOfPages { .. })
        ));
    }

    #[test]
    fn report_is_deterministic_and_serialises() {
        let m = model();
        let gates = random_gates(16);
        let toks = prompt(17, 40);
        let policy = PolicyConfig::wgkv(8, Threshold::default());
        let (_, a) = generate(&m, &gates, &toks, 5, &policy).unwrap();
        let (_, b) = generate(&m, &gates, &toks, 5, &policy).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let back: RunReport = serde_json::from_str(&a.to_json().unwrap()).unwrap();
        assert_eq!(back, a);
        let mut csv = Vec::new();
        a.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 7);
    }

    #[test]
    fn prefill_score_evals_equal_permitted_pairs() {
        let m = model();
        let toks = prompt(18, 64);
        let policy = PolicyConfig {
            forced_admit_period: Some(4),
            ..PolicyConfig::wgkv(8, Threshold::default())
        };
        let (session, _) = prefill(&m, &saturated(), &toks, &policy).unwrap();
        let mut pairs = 0u64;
        for i in 0..64usize {
            for j in 0..=i {
                if i - j < 8 || j % 4 == 0 {
                    pairs += 1;
                }
            }
        }
        assert_eq!(session.report().per_step[0].score_evals, pairs * 8);
        for c in session.caches() {
            assert_eq!(c.resident(), 8 + 14);
        }
    }
}
