//! The five subcommands.

use std::fs::File;
use std::io::BufReader;

use wgkv_core::corpus::gen_corpus;
use wgkv_core::engine::{generate, PolicyKind};
use wgkv_core::gating::{GateInit, GateParams};
use wgkv_core::model::ToyModel;
use wgkv_core::numerics::seeded_rng;
use wgkv_core::oracle::equivalence_run;
use wgkv_core::training::{appendix_suite, pareto_points, sweep_detailed, train, write_pareto_csv};

use crate::config::CliConfig;
use crate::{write_atomic, CliError};

fn load_gates(cfg: &CliConfig, model: &ToyModel) -> Result<GateParams, CliError> {
    let m = model.config();
    let gates = match &cfg.paths.gates {
        Some(path) if !path.is_file() => {
            return Err(CliError::Usage(format!("no such file {}", path.display())))
        }
        Some(path) => GateParams::read_from(BufReader::new(File::open(path)?))?,
        None => {
            let t = &cfg.train;
            let init = GateInit {
                weight_std: t.init_std,
                out_bias: t.init_bias,
            };
            GateParams::init(
                m.layers,
                m.kv_heads,
                m.head_dim,
                t.gate_hidden,
                init,
                &mut seeded_rng(cfg.seed),
            )
        }
    };
    if gates.layers() != m.layers
        || gates.kv_heads() != m.kv_heads
        || gates.head_dim() != m.head_dim
    {
        return Err(CliError::Usage(format!(
            "gates are {}x{} of dim {}, model is {}x{} of dim {}",
            gates.layers(),
            gates.kv_heads(),
            gates.head_dim(),
            m.layers,
            m.kv_heads,
            m.head_dim
        )));
    }
    Ok(gates)
}

/// A planted-anchor prompt of exactly `len` tokens (plain filler when too short for pairs).
fn prompt(cfg: &CliConfig, len: usize, seed: u64) -> Result<Vec<u32>, CliError> {
    let layout = cfg.layout()?;
    if len >= layout.prefix_len + 8 {
        let c = gen_corpus(layout, seed, 1, len, len, cfg.corpus.density)?;
        return Ok(c.sequences.into_iter().next().expect("one sequence").tokens);
    }
    let mut rng = seeded_rng(seed);
    Ok((0..len)
        .map(|_| rng.index(0, layout.anchor_start) as u32)
        .collect())
}

pub fn cmd_train(cfg: &CliConfig) -> Result<(), CliError> {
    let model = cfg.build_model()?;
    let (corpus, _) = cfg.corpora()?;
    let result = train(&model, &cfg.train_config(), &corpus)?;
    let mut gates = Vec::new();
    result.gates.write_to(&mut gates)?;
    write_atomic(&cfg.paths.out.join("gates.bin"), &gates)?;
    let mut csv = Vec::new();
    result.write_csv(&mut csv)?;
    write_atomic(&cfg.paths.out.join("loss.csv"), &csv)?;
    let last = result.history.last().expect("steps > 0");
    println!(
        "trained {} steps: l_distill {:.6e} m_soft {:.4} l_total {:.6e}",
        result.history.len(),
        last.l_distill,
        last.m_soft,
        last.l_total
    );
    Ok(())
}

pub fn cmd_infer(cfg: &CliConfig) -> Result<(), CliError> {
    let model = cfg.build_model()?;
    let gates = load_gates(cfg, &model)?;
    let tokens = prompt(cfg, cfg.infer.prompt_len, cfg.seed)?;
    let policy = cfg.policy_config(cfg.policy, tokens.len() + cfg.infer.steps);
    let (_, report) = generate(&model, &gates, &tokens, cfg.infer.steps, &policy)?;
    write_atomic(
        &cfg.paths.out.join("report.json"),
        report.to_json()?.as_bytes(),
    )?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    write_atomic(&cfg.paths.out.join("report.csv"), &csv)?;
    let heads = report.per_head_admitted.len();
    println!(
        "{}: {} tokens generated, score_evals {}, resident {} ({:.2} per head), pages {}",
        policy.kind,
        report.outputs.len(),
        report.total_score_evals(),
        report.cache.resident_entries,
        report.cache.resident_entries as f64 / heads as f64,
        report.cache.pages_allocated
    );
    Ok(())
}

pub fn cmd_sweep(cfg: &CliConfig) -> Result<(), CliError> {
    let model = cfg.build_model()?;
    let (corpus, validation) = cfg.corpora()?;
    let runs = sweep_detailed(
        &model,
        &cfg.sweep.lambdas,
        &cfg.sweep.taus,
        &corpus,
        &validation,
        &cfg.train_config(),
    )?;
    let points = pareto_points(&runs);
    let mut csv = Vec::new();
    write_pareto_csv(&points, &mut csv)?;
    write_atomic(&cfg.paths.out.join("pareto.csv"), &csv)?;
    for p in &points {
        println!(
            "lambda {:<6} tau {:<5} val_loss {:.6e} cache_frac {:.4}",
            p.lambda, p.tau, p.val_loss, p.cache_frac
        );
    }
    Ok(())
}

pub fn cmd_bench(cfg: &CliConfig) -> Result<(), CliError> {
    let model = cfg.build_model()?;
    let gates = load_gates(cfg, &model)?;
    let b = &cfg.bench;
    let max_tokens = b.prompt_len + b.steps;
    let mut rows: Vec<(PolicyKind, u64, usize, usize)> =
        b.policies.iter().map(|&k| (k, 0, 0, 0)).collect();
    let mut generated = 0;
    for run in 0..b.runs {
        let tokens = prompt(cfg, b.prompt_len, cfg.seed.wrapping_add(run as u64))?;
        let (reference, _) = generate(
            &model,
            &gates,
            &tokens,
            b.steps,
            &cfg.policy_config(PolicyKind::Full, max_tokens),
        )?;
        generated += b.steps;
        for row in &mut rows {
            let policy = cfg.policy_config(row.0, max_tokens);
            let (ids, report) = generate(&model, &gates, &tokens, b.steps, &policy)?;
            row.1 += report.total_score_evals();
            row.2 += report.cache.resident_entries;
            row.3 += ids[tokens.len()..]
                .iter()
                .zip(&reference[tokens.len()..])
                .filter(|(a, b)| a == b)
                .count();
            if row.0 == PolicyKind::Wgkv {
                let eq = equivalence_run(&model, &gates, &tokens, b.steps, &policy)?;
                if !eq.ids_agree {
                    return Err(CliError::Invariant(format!(
                        "run {run}: wgkv ids differ from the dense-masked oracle"
                    )));
                }
            }
        }
    }
    let mut csv = String::from("policy,score_evals,resident_entries,agreement\n");
    for (kind, evals, resident, agree) in &rows {
        let agreement = if generated == 0 {
            1.0
        } else {
            *agree as f64 / generated as f64
        };
        csv.push_str(&format!("{kind},{evals},{resident},{agreement:.16e}\n"));
        println!(
            "{kind:<15} score_evals {evals:>10} resident {resident:>8} agreement {:.1}%",
            100.0 * agreement
        );
    }
    write_atomic(&cfg.paths.out.join("bench.csv"), csv.as_bytes())?;
    Ok(())
}

pub fn cmd_oracle(cfg: &CliConfig) -> Result<(), CliError> {
    let o = &cfg.oracle;
    let appendix = appendix_suite(o.appendix_sets, cfg.seed)?;
    println!(
        "appendix: {} candidate sets, {} counterexamples",
        appendix.checked, appendix.counterexamples
    );

    let model = cfg.build_model()?;
    let m = *model.config();
    let mut failed = 0;
    for run in 0..o.runs {
        let seed = cfg.seed.wrapping_add(run as u64);
        let gates = match &cfg.paths.gates {
            Some(_) => load_gates(cfg, &model)?,
            None => {
                let init = GateInit {
                    weight_std: 0.5,
                    out_bias: -0.5,
                };
                GateParams::init(
                    m.layers,
                    m.kv_heads,
                    m.head_dim,
                    cfg.train.gate_hidden,
                    init,
                    &mut seeded_rng(seed),
                )
            }
        };
        let mut rng = seeded_rng(seed ^ 0xa11ce);
        let tokens: Vec<u32> = (0..o.prompt_len)
            .map(|_| rng.index(0, m.vocab) as u32)
            .collect();
        let policy = cfg.policy_config(PolicyKind::Wgkv, o.prompt_len + o.steps);
        let eq = equivalence_run(&model, &gates, &tokens, o.steps, &policy)?;
        let ok = eq.prefill_hidden_diff <= o.tolerance
            && eq.decode_logit_diff <= o.tolerance
            && eq.audit_issues.is_empty()
            && eq.admission_mismatches == 0
            && eq.ids_agree;
        if !ok {
            failed += 1;
            eprintln!("run {run}: {eq:?}");
        }
    }
    println!(
        "dense-masked oracle: {} passed, {failed} failed",
        o.runs - failed
    );
    if appendix.counterexamples > 0 || failed > 0 {
        return Err(CliError::Invariant(format!(
            "{} appendix counterexamples, {failed} oracle failures",
            appendix.counterexamples
        )));
    }
    Ok(())
}
