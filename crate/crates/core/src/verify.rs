//! Random case generation and production-vs-oracle checks, shared by the
//! `verify` and `sanity` commands and the test suites.

use serde::Serialize;

use crate::efficiency::{kv_savings, meter_run, verify_flops_savings};
use crate::error::{Error, Result};
use crate::model::{
    init_synthetic_model, ForwardObserver, Instruments, Modality, ModelConfig, ModelWeights, TokenSequence,
};
use crate::oracle::{oracle_trace, OracleConfig, OraclePrune};
use crate::planner::{plan_random, LazyMode, LazyPlan};
use crate::rng::SplitMix64;
use crate::session::{generate, RunSpec, Session};
use crate::tensor::{argmax, Matrix};

/// Seeded source of small models, prompts and plans.
pub struct CaseGen {
    rng: SplitMix64,
}

impl CaseGen {
    pub fn new(seed: u64) -> Self {
        Self { rng: SplitMix64::new(seed) }
    }

    pub fn next_seed(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// A config with 2 to `max_layers` layers and a few heads of even width.
    pub fn config(&mut self, max_layers: usize) -> ModelConfig {
        let n_layers = self.rng.range_inclusive(2, max_layers.max(2));
        let n_heads = self.rng.range_inclusive(1, 3);
        let d_head = 2 * self.rng.range_inclusive(1, 4);
        let d_ff = self.rng.range_inclusive(4, 24);
        let vocab = self.rng.range_inclusive(12, 48);
        ModelConfig::new(n_layers, n_heads, n_heads * d_head, d_ff, vocab).expect("generated config is valid")
    }

    pub fn model(&mut self, max_layers: usize) -> (u64, ModelWeights) {
        let cfg = self.config(max_layers);
        let seed = self.next_seed();
        (seed, init_synthetic_model(cfg, seed).expect("generated config is valid"))
    }

    /// Random ids; each position is visual with probability `p_visual`.
    pub fn prompt(&mut self, vocab: usize, min_len: usize, max_len: usize, p_visual: f64) -> TokenSequence {
        let len = self.rng.range_inclusive(min_len, max_len);
        let ids = (0..len).map(|_| self.rng.below(vocab as u64) as u32).collect();
        let modality =
            (0..len).map(|_| if self.rng.next_f64() < p_visual { Modality::Visual } else { Modality::Text }).collect();
        TokenSequence::new(ids, modality).expect("lengths match")
    }

    /// A random plan with at least `min_blocks` blocks (capped by what fits).
    pub fn plan(&mut self, n_layers: usize, mode: LazyMode, min_blocks: usize) -> LazyPlan {
        let max_blocks = n_layers / 2;
        if max_blocks == 0 {
            return LazyPlan::empty(n_layers, mode);
        }
        let lo = min_blocks.clamp(1, max_blocks);
        let b = self.rng.range_inclusive(lo, max_blocks);
        let mut spans = vec![2; b];
        let extra = self.rng.range_inclusive(0, n_layers - 2 * b);
        for _ in 0..extra {
            let i = self.rng.below(b as u64) as usize;
            spans[i] += 1;
        }
        let seed = self.next_seed();
        plan_random(n_layers, &spans, seed, mode).expect("spans fit by construction")
    }
}

/// Records every layer's output hidden state.
#[derive(Default)]
pub struct LayerRecorder {
    pub outputs: Vec<Matrix>,
}

impl ForwardObserver for LayerRecorder {
    fn layer_output(&mut self, _layer: usize, hidden: &Matrix) {
        self.outputs.push(hidden.clone());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Prefill,
    Generate,
    Consistency,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Mismatch {
    pub check: CheckKind,
    /// Generation step (0 is the token read off the prefill).
    pub step: Option<usize>,
    /// First layer whose output differs from the oracle's.
    pub layer: Option<usize>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseOutcome {
    pub production_ids: Vec<u32>,
    pub oracle_ids: Vec<u32>,
    /// Largest `|prefill(s)+decode(1) - prefill(s+1)|` over the last row.
    pub consistency_max_abs: f32,
    pub mismatch: Option<Mismatch>,
}

impl CaseOutcome {
    pub fn passed(&self) -> bool {
        self.mismatch.is_none()
    }
}

fn first_layer_mismatch(production: &[Matrix], oracle: &[Matrix], row_from_end: bool) -> Option<usize> {
    production.iter().zip(oracle).position(|(p, o)| {
        let want = if row_from_end { o.row(o.rows() - 1) } else { o.data() };
        let got = if row_from_end { p.row(p.rows() - 1) } else { p.data() };
        got.iter().zip(want).any(|(a, b)| a.to_bits() != b.to_bits())
    })
}

fn oracle_prune(spec: &RunSpec, prompt_len: usize) -> Option<OraclePrune> {
    spec.prune.map(|p| OraclePrune { layer: p.layer, keep_ratio: p.keep_ratio, prompt_len })
}

/// Prefill equality, greedy-id equality over `steps` tokens, and
/// prefill/decode consistency for one prompt under the given `RunSpec`.
pub fn verify_case(
    weights: &ModelWeights,
    tokens: &TokenSequence,
    spec: &RunSpec,
    steps: usize,
    cfg: &OracleConfig,
) -> Result<CaseOutcome> {
    cfg.validate()?;
    if steps == 0 {
        return Err(Error::InvalidInput("steps must be at least 1".into()));
    }
    let plan = spec.plan.as_ref();
    let prune = oracle_prune(spec, tokens.len());

    // prefill, recorded layer by layer
    let mut rec = LayerRecorder::default();
    let (logits, mut session) = Session::prefill(weights, tokens, spec, &mut Instruments::with_observer(&mut rec))?;
    let trace = oracle_trace(weights, tokens, plan, prune)?;
    let mut outcome =
        CaseOutcome { production_ids: Vec::new(), oracle_ids: Vec::new(), consistency_max_abs: 0.0, mismatch: None };
    if let Some(i) = cfg.first_mismatch(logits.data(), trace.logits.data()) {
        outcome.mismatch = Some(Mismatch {
            check: CheckKind::Prefill,
            step: None,
            layer: first_layer_mismatch(&rec.outputs, &trace.layer_outputs, false),
            detail: format!("logit {i}: production {} vs oracle {}", logits.data()[i], trace.logits.data()[i]),
        });
        return Ok(outcome);
    }

    // greedy generation, one oracle pass per step
    let mut seq = tokens.clone();
    let mut prod_row = logits.row(logits.rows() - 1).to_vec();
    let mut oracle_row = trace.logits.row(trace.logits.rows() - 1).to_vec();
    let mut step_outputs: Vec<Matrix> = Vec::new();
    let mut oracle_outputs = trace.layer_outputs;
    for step in 0..steps {
        let (p, o) = (argmax(&prod_row) as u32, argmax(&oracle_row) as u32);
        outcome.production_ids.push(p);
        outcome.oracle_ids.push(o);
        if p != o {
            outcome.mismatch = Some(Mismatch {
                check: CheckKind::Generate,
                step: Some(step),
                layer: if step == 0 { None } else { first_layer_mismatch(&step_outputs, &oracle_outputs, true) },
                detail: format!("production emitted {p}, oracle {o}"),
            });
            return Ok(outcome);
        }
        if step + 1 == steps {
            break;
        }
        seq.push_text(p);
        let mut rec = LayerRecorder::default();
        prod_row = session.step(weights, p, &mut Instruments::with_observer(&mut rec))?;
        step_outputs = rec.outputs;
        let t = oracle_trace(weights, &seq, plan, prune)?;
        oracle_row = t.logits.row(t.logits.rows() - 1).to_vec();
        oracle_outputs = t.layer_outputs;
        if step == 0 {
            // prefill(s) + decode(1) against a fresh pass over s + 1 tokens
            let reference = match spec.prune {
                Some(_) => oracle_row.clone(),
                None => {
                    let (full, _) = Session::prefill(weights, &seq, spec, &mut Instruments::new())?;
                    full.row(full.rows() - 1).to_vec()
                }
            };
            outcome.consistency_max_abs =
                prod_row.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            if (outcome.consistency_max_abs as f64) > cfg.tolerance_abs {
                outcome.mismatch = Some(Mismatch {
                    check: CheckKind::Consistency,
                    step: Some(1),
                    layer: None,
                    detail: format!("max abs difference {}", outcome.consistency_max_abs),
                });
                return Ok(outcome);
            }
        }
    }
    Ok(outcome)
}

/// One line of the threshold-vs-random comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SanityRow {
    pub source: String,
    pub mode: String,
    pub n_blocks: usize,
    pub n_lazy: usize,
    pub lazy_fraction: f64,
    pub kv_savings: f64,
    pub flops_savings: f64,
    pub oracle_ok: bool,
    /// Share of generated ids equal to the standard runtime's.
    pub token_agreement: f64,
    /// Mean absolute difference of last-row prefill logits from standard.
    pub mean_abs_logit_dev: f64,
}

/// Runs both plans over `prompts`, verifying each against the oracle and
/// comparing its output with the standard runtime.
pub fn sanity_compare(
    weights: &ModelWeights,
    prompts: &[TokenSequence],
    plans: &[(&str, &LazyPlan)],
    steps: usize,
) -> Result<Vec<SanityRow>> {
    if prompts.is_empty() {
        return Err(Error::InvalidInput("no prompts to compare on".into()));
    }
    let cfg = OracleConfig::default();
    let mut rows = Vec::new();
    for &(source, plan) in plans {
        let spec = RunSpec::lazy(plan.clone());
        let (mut agree, mut total, mut dev, mut dev_n) = (0usize, 0usize, 0.0f64, 0usize);
        let (mut kv, mut fl) = (0.0, 0.0);
        let mut oracle_ok = true;
        for p in prompts {
            let outcome = verify_case(weights, p, &spec, steps, &cfg)?;
            oracle_ok &= outcome.passed();
            let std_ids = generate(weights, p, &RunSpec::standard(), steps)?;
            agree += std_ids.iter().zip(&outcome.production_ids).filter(|(a, b)| a == b).count();
            total += std_ids.len();
            let (lz, _) = Session::prefill(weights, p, &spec, &mut Instruments::new())?;
            let (st, _) = Session::prefill(weights, p, &RunSpec::standard(), &mut Instruments::new())?;
            for (a, b) in lz.row(lz.rows() - 1).iter().zip(st.row(st.rows() - 1)) {
                dev += (a - b).abs() as f64;
                dev_n += 1;
            }
            let std_cost = meter_run(weights, p, None, 0)?;
            let lazy_cost = meter_run(weights, p, Some(plan), 0)?;
            kv += kv_savings(&std_cost, &lazy_cost)?;
            fl += verify_flops_savings(&std_cost, &lazy_cost)?;
        }
        let n = prompts.len() as f64;
        rows.push(SanityRow {
            source: source.to_string(),
            mode: plan.mode.as_str().to_string(),
            n_blocks: plan.blocks.len(),
            n_lazy: plan.n_lazy(),
            lazy_fraction: plan.lazy_fraction(),
            kv_savings: kv / n,
            flops_savings: fl / n,
            oracle_ok,
            token_agreement: agree as f64 / total as f64,
            mean_abs_logit_dev: dev / dev_n as f64,
        });
    }
    Ok(rows)
}

pub fn sanity_csv(rows: &[SanityRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}
