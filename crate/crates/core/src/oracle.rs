//! Reference routes for the paged engine.
//!
//! The dense-masked oracle keeps the whole history and masks attention with
//! the vertical-slash rule; it never touches the pool or the ring buffer.

use crate::attention::{attn_dense_masked, AttnInput};
use crate::engine::{decode_step, prefill, PolicyConfig, PolicyKind};
use crate::error::Result;
use crate::gating::{build_gate_feature, gate_forward, GateParams, Threshold};
use crate::kvstore::{audit_pages, HeadCache, KvPool};
use crate::model::{argmax, ToyModel};
use crate::numerics::Matrix;

#[derive(Debug, Clone)]
pub struct OracleRun {
    pub hidden: Matrix,
    pub logits: Matrix,
    /// Admission score per (layer, kv-head), indexed by position.
    pub scores: Vec<Vec<f64>>,
}

impl OracleRun {
    pub fn admitted(
        &self,
        layer: usize,
        head: usize,
        kv_heads: usize,
        tau: Threshold,
    ) -> Vec<bool> {
        self.scores[layer * kv_heads + head]
            .iter()
            .map(|&g| tau.admits(g))
            .collect()
    }
}

#[allow(clippy::too_many_arguments)]
fn oracle_score(
    policy: &PolicyConfig,
    gates: &GateParams,
    layer: usize,
    head: usize,
    kv_heads: usize,
    position: usize,
    k_pre: &[f64],
    k_rope: &[f64],
) -> Result<f64> {
    let bit = |b: bool| if b { 1.0 } else { 0.0 };
    Ok(match policy.kind {
        PolicyKind::Full => 1.0,
        PolicyKind::LocalSink => bit(position < policy.sink),
        PolicyKind::StaticHeads => bit(policy.retrieval_heads[layer * kv_heads + head]),
        PolicyKind::Wgkv | PolicyKind::WgkvPlusTopk => match policy.forced_admit_period {
            Some(p) => bit(position.is_multiple_of(p)),
            None => {
                gate_forward(
                    gates,
                    layer,
                    head,
                    position,
                    &build_gate_feature(k_pre, k_rope)?,
                )?
                .value
            }
        },
    })
}

/// Full-history forward over `tokens` where query `i` sees key `j` iff
/// `i - j < window` or `j` is admitted. Admission is computed from the
/// oracle's own keys.
pub fn dense_masked_run(
    model: &ToyModel,
    gates: &GateParams,
    tokens: &[u32],
    policy: &PolicyConfig,
) -> Result<OracleRun> {
    policy.validate(model)?;
    let cfg = *model.config();
    let tau = policy.threshold;
    let window = policy.window;
    let mut scores = vec![Vec::new(); cfg.layers * cfg.kv_heads];
    let out = model.forward_with(tokens, 0, |l, qkv| {
        let mut admitted = Vec::with_capacity(cfg.kv_heads);
        for h in 0..cfg.kv_heads {
            let sc = (0..tokens.len())
                .map(|j| {
                    oracle_score(
                        policy,
                        gates,
                        l,
                        h,
                        cfg.kv_heads,
                        j,
                        qkv.k_pre[h].row(j),
                        qkv.k_rope[h].row(j),
                    )
                })
                .collect::<Result<Vec<f64>>>()?;
            admitted.push(sc.iter().map(|&g| tau.admits(g)).collect::<Vec<bool>>());
            scores[l * cfg.kv_heads + h] = sc;
        }
        let heads = (0..cfg.heads)
            .map(|h| {
                let kv = cfg.kv_head_of(h);
                let input = AttnInput::new(&qkv.q_rope[h], &qkv.k_rope[kv], &qkv.v[kv], 0)?;
                let bits = &admitted[kv];
                attn_dense_masked(&input, |i, j| i - j < window || bits[j])
            })
            .collect::<Result<Vec<Matrix>>>()?;
        Ok(model.concat_heads(&heads))
    })?;
    Ok(OracleRun {
        hidden: out.hidden,
        logits: out.logits,
        scores,
    })
}

/// Greedy ids of the oracle: re-runs the full-history forward for every step.
pub fn oracle_generate(
    model: &ToyModel,
    gates: &GateParams,
    prompt: &[u32],
    steps: usize,
    policy: &PolicyConfig,
) -> Result<Vec<u32>> {
    let mut ids = prompt.to_vec();
    for _ in 0..steps {
        let run = dense_masked_run(model, gates, &ids, policy)?;
        ids.push(argmax(run.logits.row(ids.len() - 1)));
    }
    Ok(ids)
}

/// Exhaustive check of one head's cache against its admission record.
///
/// With `t` the newest position, global must hold exactly the admitted
/// `j <= t - window` and local exactly the last `min(window, t + 1)`
/// positions, each carrying its recorded score. Returns every discrepancy.
pub fn audit_cache(
    cache: &HeadCache,
    pool: &KvPool,
    scores: &[f64],
    policy: &PolicyConfig,
) -> Vec<String> {
    let mut issues = Vec::new();
    let n = scores.len();
    if cache.tokens_seen() != n {
        issues.push(format!(
            "cache saw {} tokens, record has {n}",
            cache.tokens_seen()
        ));
        return issues;
    }
    let w = policy.window;
    let local_start = n.saturating_sub(w);
    let want_global: Vec<usize> = (0..local_start)
        .filter(|&j| policy.threshold.admits(scores[j]))
        .collect();
    let want_local: Vec<usize> = (local_start..n).collect();
    let (global, local) = cache.entries(pool);
    let tag = format!("layer {} head {}", cache.layer(), cache.head());
    for (name, got, want) in [
        ("global", &global, &want_global),
        ("local", &local, &want_local),
    ] {
        let got_pos: Vec<usize> = got.iter().map(|e| e.0).collect();
        if got_pos != *want {
            issues.push(format!(
                "{tag}: {name} holds {got_pos:?}, expected {want:?}"
            ));
            continue;
        }
        for &(pos, g) in got {
            if g.to_bits() != scores[pos].to_bits() {
                issues.push(format!(
                    "{tag}: {name} position {pos} stores gate {g}, recorded {}",
                    scores[pos]
                ));
            }
        }
    }
    issues
}

/// Paged path versus dense-masked oracle for one prompt.
#[derive(Debug, Clone, Default)]
pub struct EquivalenceOutcome {
    /// Largest deviation over every prefill hidden state.
    pub prefill_hidden_diff: f64,
    /// Largest deviation over every decode logit.
    pub decode_logit_diff: f64,
    /// Cache and page audit findings collected after prefill and every step.
    pub audit_issues: Vec<String>,
    /// Positions whose admission bit differs between engine and oracle.
    pub admission_mismatches: usize,
    /// Whether the oracle's greedy choice matches every generated id.
    pub ids_agree: bool,
    pub steps: usize,
}

/// Greedy-decode `steps` tokens through the paged engine, auditing the
/// caches after every step, then replay the whole sequence through the
/// oracle. Causality lets one oracle pass cover every step.
pub fn equivalence_run(
    model: &ToyModel,
    gates: &GateParams,
    prompt: &[u32],
    steps: usize,
    policy: &PolicyConfig,
) -> Result<EquivalenceOutcome> {
    let (mut session, pre) = prefill(model, gates, prompt, policy)?;
    let mut out = EquivalenceOutcome {
        steps,
        ids_agree: true,
        ..Default::default()
    };
    let audit = |session: &crate::engine::Session, out: &mut EquivalenceOutcome| {
        for c in session.caches() {
            let scores = session.scores(c.layer(), c.head());
            out.audit_issues
                .extend(audit_cache(c, session.pool(), scores, session.policy()));
        }
        if let Err(e) = audit_pages(session.caches(), session.pool()) {
            out.audit_issues.push(e);
        }
    };
    audit(&session, &mut out);
    let mut ids = prompt.to_vec();
    let mut logits = Vec::with_capacity(steps);
    let mut next = argmax(pre.logits.row(prompt.len() - 1));
    for _ in 0..steps {
        ids.push(next);
        let step = decode_step(model, gates, &mut session, next, policy)?;
        audit(&session, &mut out);
        next = argmax(&step.logits);
        logits.push(step.logits);
    }
    let oracle = dense_masked_run(model, gates, &ids, policy)?;
    let t = prompt.len();
    for r in 0..t {
        for (a, b) in pre.hidden.row(r).iter().zip(oracle.hidden.row(r)) {
            out.prefill_hidden_diff = out.prefill_hidden_diff.max((a - b).abs());
        }
    }
    if argmax(oracle.logits.row(t - 1)) != ids.get(t).copied().unwrap_or(next) {
        out.ids_agree = false;
    }
    for (s, row) in logits.iter().enumerate() {
        let o = oracle.logits.row(t + s);
        for (a, b) in row.iter().zip(o) {
            out.decode_logit_diff = out.decode_logit_diff.max((a - b).abs());
        }
        let want = ids.get(t + s + 1).copied().unwrap_or(next);
        if argmax(o) != want {
            out.ids_agree = false;
        }
    }
    let cfg = model.config();
    for l in 0..cfg.layers {
        for h in 0..cfg.kv_heads {
            let engine = session.admitted(l, h);
            let oracle_bits = oracle.admitted(l, h, cfg.kv_heads, policy.threshold);
            out.admission_mismatches += engine
                .iter()
                .zip(&oracle_bits)
                .filter(|(a, b)| a != b)
                .count();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gating::GateInit;
    use crate::model::ModelConfig;
    use crate::numerics::seeded_rng;

    #[test]
    fn audit_flags_a_wrong_record() {
        let model = ToyModel::random(ModelConfig::default(), 1).unwrap();
        let gates = GateParams::init(
            2,
            4,
            16,
            8,
            GateInit {
                weight_std: 0.5,
                out_bias: -0.5,
            },
            &mut seeded_rng(2),
        );
        let policy = PolicyConfig::wgkv(4, Threshold::default());
        let prompt: Vec<u32> = (0..20).map(|i| (i * 5 % 64) as u32).collect();
        let (session, _) = prefill(&model, &gates, &prompt, &policy).unwrap();
        let c = session.cache(0, 0);
        let good = session.scores(0, 0).to_vec();
        assert!(audit_cache(c, session.pool(), &good, &policy).is_empty());
        let mut flipped = good.clone();
        flipped[3] = if good[3] >= 0.1 { 0.01 } else { 0.9 };
        assert!(!audit_cache(c, session.pool(), &flipped, &policy).is_empty());
        assert!(!audit_cache(c, session.pool(), &good[..19], &policy).is_empty());
    }

    #[test]
    fn equivalence_run_is_clean() {
        let model = ToyModel::random(ModelConfig::default(), 3).unwrap();
        let gates = GateParams::init(
            2,
            4,
            16,
            8,
            GateInit {
                weight_std: 0.5,
                out_bias: -0.3,
            },
            &mut seeded_rng(4),
        );
        let policy = PolicyConfig::wgkv(6, Threshold::default());
        let prompt: Vec<u32> = (0..40).map(|i| (i * 11 % 64) as u32).collect();
        let out = equivalence_run(&model, &gates, &prompt, 12, &policy).unwrap();
        assert!(
            out.prefill_hidden_diff < 1e-10 && out.decode_logit_diff < 1e-8,
            "{out:?}"
        );
        assert!(out.audit_issues.is_empty() && out.ids_agree && out.admission_mismatches == 0);
    }
}
