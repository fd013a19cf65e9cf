//! Parameter, FLOP and cache-byte accounting per mode, the closed-form
//! savings predictions they are checked against, and a decode throughput
//! benchmark.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{FlopMeter, Instruments, Modality, ModelWeights, Op, TokenSequence};
use crate::planner::{LazyMode, LazyPlan};
use crate::rng::SplitMix64;
use crate::session::{RunMode, RunSpec, Session};
use crate::tensor::argmax;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub mode: RunMode,
    /// Parameters the mode actually reads. GLA lazy layers never touch their
    /// query and key projections.
    pub params: usize,
    pub prefill_flops: u64,
    pub decode_flops: u64,
    /// K and V bytes held after prefill and any decode steps.
    pub kv_bytes: usize,
    pub qcache_peak_bytes: usize,
    pub seq_len: usize,
    pub n_text: usize,
    pub n_visual: usize,
    pub n_lazy: usize,
    pub n_layers: usize,
    /// One attention projector's prefill FLOPs over the standard prefill total.
    pub beta: f64,
    pub decode_steps: usize,
}

impl CostReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Header plus one data row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(self)?;
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

fn standard_prefill_flops(weights: &ModelWeights, tokens: &TokenSequence) -> Result<FlopMeter> {
    let mut inst = Instruments::new();
    Session::prefill(weights, tokens, &RunSpec::standard(), &mut inst)?;
    Ok(inst.flops)
}

/// Meters one prefill plus `decode_steps` greedy steps. A standard prefill is
/// always metered as well, to obtain `beta`.
pub fn meter_run(
    weights: &ModelWeights,
    tokens: &TokenSequence,
    plan: Option<&LazyPlan>,
    decode_steps: usize,
) -> Result<CostReport> {
    let spec = plan.cloned().map_or_else(RunSpec::standard, RunSpec::lazy);
    meter_spec(weights, tokens, &spec, decode_steps)
}

/// [`meter_run`] for a full run spec, pruning included.
pub fn meter_spec(
    weights: &ModelWeights,
    tokens: &TokenSequence,
    spec: &RunSpec,
    decode_steps: usize,
) -> Result<CostReport> {
    meter_generate(weights, tokens, spec, decode_steps).map(|(report, _)| report)
}

/// Metered run that also returns the `decode_steps + 1` greedy ids.
pub fn meter_generate(
    weights: &ModelWeights,
    tokens: &TokenSequence,
    spec: &RunSpec,
    decode_steps: usize,
) -> Result<(CostReport, Vec<u32>)> {
    let cfg = &weights.config;
    let std_flops = standard_prefill_flops(weights, tokens)?;
    let plan = spec.plan.as_ref();

    let mut prefill = Instruments::new();
    let (logits, mut session) = Session::prefill(weights, tokens, spec, &mut prefill)?;
    let mut decode = Instruments::new();
    let mut seq = tokens.clone();
    let mut ids = vec![argmax(logits.row(logits.rows() - 1)) as u32];
    for _ in 0..decode_steps {
        let next = *ids.last().expect("non-empty");
        seq.push_text(next);
        ids.push(argmax(&session.step(weights, next, &mut decode)?) as u32);
    }

    let n_lazy = plan.map_or(0, LazyPlan::n_lazy);
    let d = cfg.d_model;
    let skipped_params = match plan.map(|p| p.mode) {
        Some(LazyMode::Gla) => n_lazy * 2 * d * d,
        _ => 0,
    };
    let beta = (std_flops.get(Op::VProj) / cfg.n_layers as u64) as f64 / std_flops.total() as f64;
    let report = CostReport {
        mode: spec.mode(),
        params: cfg.param_count() - skipped_params,
        prefill_flops: prefill.flops.total(),
        decode_flops: decode.flops.total(),
        kv_bytes: session.kv_bytes(),
        qcache_peak_bytes: session.qcache_peak_bytes(),
        seq_len: seq.len(),
        n_text: seq.n_text(),
        n_visual: seq.n_visual(),
        n_lazy,
        n_layers: cfg.n_layers,
        beta,
        decode_steps,
    };
    Ok((report, ids))
}

fn same_workload(a: &CostReport, b: &CostReport) -> Result<()> {
    let key = |r: &CostReport| (r.seq_len, r.n_text, r.n_visual, r.n_layers, r.decode_steps);
    if key(a) != key(b) || a.beta != b.beta {
        return Err(Error::InvalidInput("reports describe different models or inputs".into()));
    }
    Ok(())
}

/// Measured relative prefill FLOP reduction of `lazy` against `standard`.
pub fn verify_flops_savings(standard: &CostReport, lazy: &CostReport) -> Result<f64> {
    same_workload(standard, lazy)?;
    if standard.mode != RunMode::Standard {
        return Err(Error::InvalidInput("baseline report is not a standard run".into()));
    }
    Ok(1.0 - lazy.prefill_flops as f64 / standard.prefill_flops as f64)
}

/// Measured relative K/V byte reduction of `lazy` against `standard`.
pub fn kv_savings(standard: &CostReport, lazy: &CostReport) -> Result<f64> {
    same_workload(standard, lazy)?;
    Ok(1.0 - lazy.kv_bytes as f64 / standard.kv_bytes as f64)
}

/// Predicted K/V saving: `n/(2N)` for GLA, scaled by the visual share for VLA.
pub fn kv_savings_formula(mode: LazyMode, n_lazy: usize, n_layers: usize, n_text: usize, n_visual: usize) -> f64 {
    let base = n_lazy as f64 / (2.0 * n_layers as f64);
    match mode {
        LazyMode::Gla => base,
        LazyMode::Vla => n_visual as f64 / (n_visual + n_text) as f64 * base,
    }
}

/// Predicted prefill FLOP saving: `2 n beta` for GLA, scaled by the visual
/// share for VLA.
pub fn flops_savings_formula(mode: LazyMode, n_lazy: usize, beta: f64, n_text: usize, n_visual: usize) -> f64 {
    let base = 2.0 * n_lazy as f64 * beta;
    match mode {
        LazyMode::Gla => base,
        LazyMode::Vla => n_visual as f64 / (n_visual + n_text) as f64 * base,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    pub context_len: usize,
    pub steps: usize,
    pub repeats: usize,
    pub seed: u64,
    /// Leading share of the prompt labelled visual.
    pub visual_fraction: f64,
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_len == 0 {
            return Err(Error::InvalidInput("context length must be at least 1".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidInput("steps must be at least 1".into()));
        }
        if self.repeats == 0 {
            return Err(Error::InvalidInput("repeats must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.visual_fraction) {
            return Err(Error::InvalidInput(format!("visual fraction {} outside [0, 1]", self.visual_fraction)));
        }
        Ok(())
    }
}

/// Seeded prompt: `visual_fraction` of the positions first, labelled visual,
/// then text.
pub fn bench_prompt(vocab_size: usize, cfg: &BenchConfig) -> TokenSequence {
    let mut rng = SplitMix64::new(cfg.seed);
    let n_visual = (cfg.visual_fraction * cfg.context_len as f64).round() as usize;
    let ids = (0..cfg.context_len).map(|_| rng.below(vocab_size as u64) as u32).collect();
    let modality = (0..cfg.context_len).map(|i| if i < n_visual { Modality::Visual } else { Modality::Text }).collect();
    TokenSequence::new(ids, modality).expect("lengths match")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchStats {
    pub mode: RunMode,
    pub context_len: usize,
    pub steps: usize,
    /// Decode tokens per second of each timed repeat.
    pub tokens_per_sec: Vec<f64>,
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
}

/// Linear interpolation between closest ranks.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl BenchStats {
    fn from_samples(mode: RunMode, context_len: usize, steps: usize, samples: Vec<f64>) -> Self {
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        Self {
            mode,
            context_len,
            steps,
            median: percentile(&sorted, 0.5),
            p10: percentile(&sorted, 0.1),
            p90: percentile(&sorted, 0.9),
            tokens_per_sec: samples,
        }
    }

    /// Standard deviation over mean of the repeats.
    pub fn coefficient_of_variation(&self) -> f64 {
        let n = self.tokens_per_sec.len() as f64;
        let mean = self.tokens_per_sec.iter().sum::<f64>() / n;
        let var = self.tokens_per_sec.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        var.sqrt() / mean
    }

    /// Reads back the repeat rows of [`BenchStats::to_csv`] output.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let mut header: Option<(RunMode, usize, usize)> = None;
        let mut samples = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or_default();
            if !field(3).starts_with("repeat") {
                continue;
            }
            let bad = |what: &str| Error::InvalidInput(format!("bench csv: bad {what} {:?}", rec.as_slice()));
            let mode = RunMode::parse(field(0))?;
            let context: usize = field(1).parse().map_err(|_| bad("context"))?;
            let steps: usize = field(2).parse().map_err(|_| bad("steps"))?;
            let rate: f64 = field(4).parse().map_err(|_| bad("rate"))?;
            if header.get_or_insert((mode, context, steps)) != &(mode, context, steps) {
                return Err(bad("row"));
            }
            samples.push(rate);
        }
        let (mode, context, steps) =
            header.ok_or_else(|| Error::InvalidInput("bench csv has no repeat rows".into()))?;
        Ok(Self::from_samples(mode, context, steps, samples))
    }

    /// Repeats agree to within 20%.
    pub fn is_stable(&self) -> bool {
        self.coefficient_of_variation() < 0.2
    }

    /// Columns `mode,context,steps,row,tokens_per_sec,speedup`: one row per
    /// repeat, then `median`, `p10`, `p90`. With a baseline, `speedup` is
    /// this run's rate over the baseline median.
    pub fn to_csv(&self, baseline: Option<&BenchStats>) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["mode", "context", "steps", "row", "tokens_per_sec", "speedup"])?;
        let mut rows: Vec<(String, f64)> =
            self.tokens_per_sec.iter().enumerate().map(|(i, &t)| (format!("repeat{i}"), t)).collect();
        rows.push(("median".into(), self.median));
        rows.push(("p10".into(), self.p10));
        rows.push(("p90".into(), self.p90));
        for (name, rate) in rows {
            let speedup = baseline.map_or(String::new(), |b| format!("{:.6}", rate / b.median));
            w.write_record([
                self.mode.as_str().to_string(),
                self.context_len.to_string(),
                self.steps.to_string(),
                name,
                format!("{rate:.6}"),
                speedup,
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

/// Times greedy decode steps after a seeded prompt. The prefill and one
/// warm-up step are excluded; every repeat starts from the same post-prefill
/// caches.
pub fn bench_decode(weights: &ModelWeights, plan: Option<&LazyPlan>, cfg: &BenchConfig) -> Result<BenchStats> {
    cfg.validate()?;
    let prompt = bench_prompt(weights.config.vocab_size, cfg);
    let spec = plan.cloned().map_or_else(RunSpec::standard, RunSpec::lazy);
    let (logits, session) = Session::prefill(weights, &prompt, &spec, &mut Instruments::new())?;
    let first = argmax(logits.row(logits.rows() - 1)) as u32;

    let run = |steps: usize| -> Result<f64> {
        let mut s = session.clone();
        let mut inst = Instruments::new();
        let mut tok = first;
        let start = Instant::now();
        for _ in 0..steps {
            tok = argmax(&s.step(weights, tok, &mut inst)?) as u32;
        }
        Ok(start.elapsed().as_secs_f64())
    };
    run(1)?;
    let mut samples = Vec::with_capacity(cfg.repeats);
    for _ in 0..cfg.repeats {
        let secs = run(cfg.steps)?;
        samples.push(cfg.steps as f64 / secs.max(f64::MIN_POSITIVE));
    }
    Ok(BenchStats::from_samples(spec.mode(), cfg.context_len, cfg.steps, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_synthetic_model, ModelConfig};
    use crate::planner::LazyBlock;

    fn model(n_layers: usize) -> ModelWeights {
        init_synthetic_model(ModelConfig::new(n_layers, 2, 8, 12, 30).unwrap(), 8).unwrap()
    }

    fn prompt(n_text: usize, n_visual: usize) -> TokenSequence {
        let mut m = vec![Modality::Visual; n_visual];
        m.extend(vec![Modality::Text; n_text]);
        TokenSequence::new((0..(n_text + n_visual) as u32).map(|i| i % 30).collect(), m).unwrap()
    }

    fn plan(mode: LazyMode, n_layers: usize, blocks: &[(usize, usize)]) -> LazyPlan {
        let mut p = LazyPlan::empty(n_layers, mode);
        p.blocks = blocks.iter().map(|&(a, n)| LazyBlock::span(a, n)).collect();
        p
    }

    #[test]
    fn standard_kv_bytes_per_layer() {
        let w = model(3);
        let r = meter_run(&w, &prompt(5, 2), None, 0).unwrap();
        assert_eq!(r.kv_bytes, 3 * 2 * 7 * 8 * 4);
        assert_eq!(r.qcache_peak_bytes, 0);
        assert_eq!(r.params, w.config.param_count());
    }

    #[test]
    fn standard_prefill_flops_closed_form() {
        for (n_layers, s) in [(1usize, 1usize), (3, 7), (5, 12)] {
            let w = model(n_layers);
            let r = meter_run(&w, &prompt(s - s / 2, s / 2), None, 0).unwrap();
            let (d, ff, v) = (8, 12, 30);
            let per_layer = 8 * s * d * d + 2 * s * (s + 1) * d + 6 * s * d * ff;
            assert_eq!(r.prefill_flops as usize, n_layers * per_layer + 2 * s * d * v);
        }
    }

    #[test]
    fn kv_bytes_order_across_modes() {
        let w = model(6);
        let tokens = prompt(4, 5);
        let p = plan(LazyMode::Gla, 6, &[(0, 1), (2, 3)]);
        let std = meter_run(&w, &tokens, None, 2).unwrap();
        let gla = meter_run(&w, &tokens, Some(&p), 2).unwrap();
        let vla = meter_run(&w, &tokens, Some(&p.clone().with_mode(LazyMode::Vla)), 2).unwrap();
        assert!(gla.kv_bytes < vla.kv_bytes && vla.kv_bytes < std.kv_bytes);
        for r in [&gla, &vla] {
            assert!(r.qcache_peak_bytes * 2 * 6 <= std.kv_bytes);
        }
    }

    #[test]
    fn gla_savings_quarter() {
        let w = model(8);
        let p = plan(LazyMode::Gla, 8, &[(1, 4)]);
        let tokens = prompt(6, 3);
        let std = meter_run(&w, &tokens, None, 0).unwrap();
        let gla = meter_run(&w, &tokens, Some(&p), 0).unwrap();
        assert_eq!(kv_savings(&std, &gla).unwrap(), 0.25);
        let f = verify_flops_savings(&std, &gla).unwrap();
        assert!((f - flops_savings_formula(LazyMode::Gla, 4, std.beta, 6, 3)).abs() < 1e-12);
        assert_eq!(gla.params, w.config.param_count() - 4 * 2 * 64);
    }

    #[test]
    fn decode_steps_keep_formula() {
        let w = model(6);
        let tokens = prompt(3, 5);
        let p = plan(LazyMode::Vla, 6, &[(0, 2), (3, 2)]);
        let std = meter_run(&w, &tokens, None, 3).unwrap();
        let vla = meter_run(&w, &tokens, Some(&p), 3).unwrap();
        assert_eq!((vla.n_text, vla.n_visual, vla.seq_len), (6, 5, 11));
        let want = kv_savings_formula(LazyMode::Vla, 4, 6, 6, 5);
        assert!((kv_savings(&std, &vla).unwrap() - want).abs() < 1e-12);
        // generated tokens are text, so VLA decode projects everything
        assert_eq!(vla.decode_flops, std.decode_flops);
        let gla = meter_run(&w, &tokens, Some(&p.clone().with_mode(LazyMode::Gla)), 3).unwrap();
        assert_eq!(std.decode_flops - gla.decode_flops, 3 * 4 * 2 * 2 * 64);
    }

    #[test]
    fn empty_plan_saves_nothing() {
        let w = model(4);
        let tokens = prompt(4, 4);
        let std = meter_run(&w, &tokens, None, 0).unwrap();
        let gla = meter_run(&w, &tokens, Some(&LazyPlan::empty(4, LazyMode::Gla)), 0).unwrap();
        assert_eq!(verify_flops_savings(&std, &gla).unwrap(), 0.0);
        let other = meter_run(&w, &prompt(3, 4), None, 0).unwrap();
        assert!(verify_flops_savings(&other, &gla).is_err());
    }

    #[test]
    fn percentiles() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&s, 0.5), 3.0);
        assert!((percentile(&s, 0.1) - 1.4).abs() < 1e-12);
        assert!((percentile(&s, 0.9) - 4.6).abs() < 1e-12);
        assert_eq!(percentile(&[7.0], 0.9), 7.0);
    }

    #[test]
    fn metered_ids_match_generation_and_pruning_shrinks_cache() {
        use crate::session::{generate, PruneRequest};
        let w = model(4);
        let t = prompt(3, 6);
        let spec = RunSpec::lazy(plan(LazyMode::Vla, 4, &[(1, 2)]));
        let (report, ids) = meter_generate(&w, &t, &spec, 4).unwrap();
        assert_eq!(ids, generate(&w, &t, &spec, 5).unwrap());
        assert_eq!(report.seq_len, 9 + 4);
        let pruned = spec.clone().with_prune(PruneRequest { layer: 0, keep_ratio: 0.5 });
        let small = meter_spec(&w, &t, &pruned, 4).unwrap();
        assert!(small.kv_bytes < report.kv_bytes);
        assert_eq!(small.prefill_flops, report.prefill_flops);
    }

    #[test]
    fn bench_shape_and_validation() {
        let w = model(2);
        let cfg = BenchConfig { context_len: 16, steps: 3, repeats: 4, seed: 1, visual_fraction: 0.5 };
        let stats = bench_decode(&w, None, &cfg).unwrap();
        assert_eq!(stats.tokens_per_sec.len(), 4);
        assert!(stats.p10 <= stats.median && stats.median <= stats.p90);
        let csv = stats.to_csv(Some(&stats)).unwrap();
        assert_eq!(csv.lines().count(), 1 + 4 + 3);
        assert!(csv.lines().nth(5).unwrap().contains(",median,"));
        let back = BenchStats::from_csv(&csv).unwrap();
        assert_eq!((back.mode, back.context_len, back.steps), (RunMode::Standard, 16, 3));
        assert_eq!(back.tokens_per_sec.len(), 4);
        assert!((back.median - stats.median).abs() <= 1e-5 * stats.median);
        assert!(BenchStats::from_csv("mode,context,steps,row,tokens_per_sec,speedup\n").is_err());
        assert!(bench_decode(&w, None, &BenchConfig { steps: 0, ..cfg }).is_err());
        assert!(bench_decode(&w, None, &BenchConfig { context_len: 0, ..cfg }).is_err());
        let p = bench_prompt(30, &cfg);
        assert_eq!((p.n_visual(), p.n_text()), (8, 8));
    }
}
