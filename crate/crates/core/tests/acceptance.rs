//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fail.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use lazyattn::efficiency::{
    bench_decode, flops_savings_formula, kv_savings, kv_savings_formula, meter_run, verify_flops_savings, BenchConfig,
};
use lazyattn::lazy::SharedCacheStore;
use lazyattn::model::{ForwardObserver, Instruments};
use lazyattn::oracle::{naive_js, oracle_full_generate, oracle_prefill, OracleConfig};
use lazyattn::planner::{plan_from_adjacent, plan_random_matching, LazyBlock, LazyMode, LazyPlan};
use lazyattn::profiler::{js_divergence, profile_model, ProfileOptions};
use lazyattn::rng::SplitMix64;
use lazyattn::session::{generate, PruneRequest, RunSpec, Session};
use lazyattn::verify::{sanity_compare, sanity_csv, verify_case, CaseGen};
use lazyattn::{init_synthetic_model, Matrix, Modality, ModelConfig, ModelWeights, TokenSequence};

type Outcome = Result<String, String>;

fn bitwise(a: &Matrix, b: &Matrix) -> bool {
    a.rows() == b.rows()
        && a.cols() == b.cols()
        && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn prefill(w: &ModelWeights, t: &TokenSequence, spec: &RunSpec) -> Matrix {
    Session::prefill(w, t, spec, &mut Instruments::new()).expect("prefill").0
}

fn lazy_store(w: &ModelWeights, t: &TokenSequence, spec: &RunSpec) -> SharedCacheStore {
    let (_, s) = Session::prefill(w, t, spec, &mut Instruments::new()).expect("prefill");
    s.lazy_store().expect("lazy session").clone()
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    if elapsed < limit {
        Ok(())
    } else {
        Err(format!("took {elapsed:.1?}, limit {limit:?}"))
    }
}

fn mode_identity() -> Outcome {
    let start = Instant::now();
    let mut g = CaseGen::new(101);
    let cases = 24;
    for c in 0..cases {
        let (_, w) = g.model(8);
        let t = g.prompt(w.config.vocab_size, 1, 24, 0.5);
        let want = prefill(&w, &t, &RunSpec::standard());
        for mode in [LazyMode::Gla, LazyMode::Vla] {
            let got = prefill(&w, &t, &RunSpec::lazy(LazyPlan::empty(w.config.n_layers, mode)));
            if !bitwise(&got, &want) {
                return Err(format!("case {c}: {mode:?} with the empty plan differs from standard"));
            }
        }
    }
    within(start.elapsed(), Duration::from_secs(60))?;
    Ok(format!("{cases} cases bitwise identical in {:.1?}", start.elapsed()))
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut g = CaseGen::new(202);
    let (cases, steps) = (24, 16);
    let mut multi = 0;
    for c in 0..cases {
        let (_, w) = g.model(8);
        let t = g.prompt(w.config.vocab_size, 2, 20, 0.5);
        let mode = if c % 2 == 0 { LazyMode::Gla } else { LazyMode::Vla };
        let plan = g.plan(w.config.n_layers, mode, 2);
        multi += usize::from(plan.blocks.len() > 1);
        let spec = RunSpec::lazy(plan.clone());
        if !bitwise(&prefill(&w, &t, &spec), &oracle_prefill(&w, &t, Some(&plan), None).unwrap()) {
            return Err(format!("case {c}: {mode:?} prefill differs from the oracle"));
        }
        let got = generate(&w, &t, &spec, steps).unwrap();
        let want = oracle_full_generate(&w, &t, Some(&plan), None, steps).unwrap();
        if got != want {
            return Err(format!("case {c}: {mode:?} ids {got:?} vs oracle {want:?}"));
        }
    }
    if multi == 0 {
        return Err("no multi-block plan was exercised".into());
    }
    within(start.elapsed(), Duration::from_secs(300))?;
    Ok(format!(
        "{cases} plans ({multi} multi-block), prefill bitwise and {steps}-step ids equal, {:.1?}",
        start.elapsed()
    ))
}

#[derive(Default)]
struct AttentionRecorder {
    layers: Vec<Vec<Matrix>>,
}

impl ForwardObserver for AttentionRecorder {
    fn wants_attention(&self) -> bool {
        true
    }

    fn attention(&mut self, layer: usize, heads: &[Matrix]) {
        assert_eq!(layer, self.layers.len());
        self.layers.push(heads.to_vec());
    }
}

fn gla_sharing() -> Outcome {
    let mut g = CaseGen::new(303);
    let mut compared = 0;
    for c in 0..20 {
        let (_, w) = g.model(8);
        let t = g.prompt(w.config.vocab_size, 2, 20, 0.5);
        let plan = g.plan(w.config.n_layers, LazyMode::Gla, 1);
        let mut rec = AttentionRecorder::default();
        Session::prefill(&w, &t, &RunSpec::lazy(plan.clone()), &mut Instruments::with_observer(&mut rec)).unwrap();
        for b in &plan.blocks {
            for &l in &b.lazy {
                let same = rec.layers[l].iter().zip(&rec.layers[b.anchor]).all(|(x, y)| bitwise(x, y));
                if !same {
                    return Err(format!("case {c}: layer {l} attention differs from anchor {}", b.anchor));
                }
                compared += 1;
            }
        }
    }
    Ok(format!("{compared} lazy layers match their anchors bitwise"))
}

/// `prefill(p) + decode(t)` against `prefill(p + t)`, last row.
fn consistency_gap(w: &ModelWeights, p: &TokenSequence, spec: &RunSpec) -> f32 {
    let (logits, mut s) = Session::prefill(w, p, spec, &mut Instruments::new()).unwrap();
    let next = lazyattn::tensor::argmax(logits.row(logits.rows() - 1)) as u32;
    let row = s.step(w, next, &mut Instruments::new()).unwrap();
    let mut longer = p.clone();
    longer.push_text(next);
    let full = prefill(w, &longer, spec);
    row.iter().zip(full.row(full.rows() - 1)).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
}

fn prefill_decode_consistency() -> Outcome {
    let mut g = CaseGen::new(404);
    let mut worst = 0.0f32;
    let cases = 21;
    for c in 0..cases {
        let (_, w) = g.model(8);
        let t = g.prompt(w.config.vocab_size, 1, 20, 0.5);
        let spec = match c % 3 {
            0 => RunSpec::standard(),
            1 => RunSpec::lazy(g.plan(w.config.n_layers, LazyMode::Gla, 1)),
            _ => RunSpec::lazy(g.plan(w.config.n_layers, LazyMode::Vla, 1)),
        };
        let gap = consistency_gap(&w, &t, &spec);
        worst = worst.max(gap);
        if gap > 1e-5 {
            return Err(format!("case {c} ({}): gap {gap:e}", spec.mode().as_str()));
        }
    }
    Ok(format!("{cases} cases over standard/gla/vla, max gap {worst:e} <= 1e-5"))
}

fn random_distribution(rng: &mut SplitMix64, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
    if n > 1 && rng.next_f64() < 0.3 {
        v[rng.below(n as u64) as usize] = 0.0;
    }
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

fn js_values() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let p = [0.2, 0.3, 0.5];
    let same = js_divergence(&p, &p).unwrap();
    if same != 0.0 {
        return Err(format!("JS(p,p) = {same}"));
    }
    let disjoint = js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
    if (disjoint - ln2).abs() > 1e-12 {
        return Err(format!("JS((1,0),(0,1)) = {disjoint}"));
    }
    let mut rng = SplitMix64::new(505);
    for i in 0..1000 {
        let n = rng.range_inclusive(1, 12);
        let (p, q) = (random_distribution(&mut rng, n), random_distribution(&mut rng, n));
        let (pq, qp) = (js_divergence(&p, &q).unwrap(), js_divergence(&q, &p).unwrap());
        if pq != qp || !(0.0..=ln2).contains(&pq) {
            return Err(format!("pair {i}: JS {pq} / {qp}"));
        }
        if (pq - naive_js(&p, &q)).abs() > 1e-12 {
            return Err(format!("pair {i}: disagrees with the entropy form"));
        }
    }
    Ok("unit values exact; 1000 pairs symmetric and within [0, ln 2]".into())
}

fn mixed_prompt(n_text: usize, n_visual: usize, vocab: usize, rng: &mut SplitMix64) -> TokenSequence {
    let mut modality = vec![Modality::Visual; n_visual];
    modality.extend(vec![Modality::Text; n_text]);
    rng.shuffle(&mut modality);
    let ids = (0..modality.len()).map(|_| rng.below(vocab as u64) as u32).collect();
    TokenSequence::new(ids, modality).unwrap()
}

fn kv_formulas() -> Outcome {
    let mut g = CaseGen::new(606);
    let mut rng = SplitMix64::new(607);
    let configs = 60;
    for c in 0..configs {
        let (_, w) = g.model(12);
        let n_layers = w.config.n_layers;
        let mode = if c % 2 == 0 { LazyMode::Gla } else { LazyMode::Vla };
        let plan = g.plan(n_layers, mode, 1);
        let (n_text, n_visual) = (rng.range_inclusive(0, 10), rng.range_inclusive(0, 10));
        if n_text + n_visual == 0 {
            continue;
        }
        let t = mixed_prompt(n_text, n_visual, w.config.vocab_size, &mut rng);
        let std_cost = meter_run(&w, &t, None, 0).unwrap();
        let lazy_cost = meter_run(&w, &t, Some(&plan), 0).unwrap();
        let got = kv_savings(&std_cost, &lazy_cost).unwrap();
        let want = kv_savings_formula(mode, plan.n_lazy(), n_layers, n_text, n_visual);
        if (got - want).abs() > 1e-12 {
            return Err(format!("config {c}: metered {got} vs formula {want}"));
        }
        if lazy_cost.qcache_peak_bytes * 2 * n_layers > std_cost.kv_bytes {
            return Err(format!(
                "config {c}: qcache peak {} above {} / (2*{n_layers})",
                lazy_cost.qcache_peak_bytes, std_cost.kv_bytes
            ));
        }
    }
    let w = init_synthetic_model(ModelConfig::new(10, 2, 16, 24, 32).unwrap(), 6).unwrap();
    let mut plan = LazyPlan::empty(10, LazyMode::Gla);
    plan.blocks = vec![LazyBlock::span(0, 3), LazyBlock::span(4, 4)];
    let t = mixed_prompt(7, 5, 32, &mut rng);
    let headline =
        kv_savings(&meter_run(&w, &t, None, 0).unwrap(), &meter_run(&w, &t, Some(&plan), 0).unwrap()).unwrap();
    if (headline - 0.35).abs() > 1e-12 {
        return Err(format!("n/N = 0.7 gives {headline}, not 0.35"));
    }
    Ok(format!("{configs} configs exact within 1e-12; n/N = 0.7 saves {headline}"))
}

fn flops_savings() -> Outcome {
    let mut g = CaseGen::new(707);
    let mut rng = SplitMix64::new(708);
    let mut worst = 0.0f64;
    for c in 0..30 {
        let (_, w) = g.model(10);
        let n_layers = w.config.n_layers;
        let gla = g.plan(n_layers, LazyMode::Gla, 1);
        let vla = gla.clone().with_mode(LazyMode::Vla);
        let (n_text, n_visual) = (rng.range_inclusive(1, 10), rng.range_inclusive(0, 10));
        let t = mixed_prompt(n_text, n_visual, w.config.vocab_size, &mut rng);
        let std_cost = meter_run(&w, &t, None, 0).unwrap();
        let gla_cost = meter_run(&w, &t, Some(&gla), 0).unwrap();
        let vla_cost = meter_run(&w, &t, Some(&vla), 0).unwrap();
        let got = verify_flops_savings(&std_cost, &gla_cost).unwrap();
        let want = flops_savings_formula(LazyMode::Gla, gla.n_lazy(), std_cost.beta, n_text, n_visual);
        let rel = (got - want).abs() / want;
        worst = worst.max(rel);
        if rel > 0.01 {
            return Err(format!("config {c}: metered {got} vs 2n*beta {want}"));
        }
        let vla_saved = verify_flops_savings(&std_cost, &vla_cost).unwrap();
        if vla_saved >= got {
            return Err(format!("config {c}: VLA saves {vla_saved} >= GLA {got} with |T| = {n_text}"));
        }
    }
    Ok(format!("30 configs, worst relative error {worst:e}; VLA always below GLA"))
}

fn vla_degeneracies() -> Outcome {
    let mut g = CaseGen::new(808);
    for c in 0..20 {
        let (_, w) = g.model(8);
        let n_layers = w.config.n_layers;
        let plan = g.plan(n_layers, LazyMode::Vla, 1);
        let text = g.prompt(w.config.vocab_size, 1, 16, 0.0);
        let vla = RunSpec::lazy(plan.clone());
        if !bitwise(&prefill(&w, &text, &vla), &prefill(&w, &text, &RunSpec::standard())) {
            return Err(format!("case {c}: text-only VLA differs from standard"));
        }
        if generate(&w, &text, &vla, 6).unwrap() != generate(&w, &text, &RunSpec::standard(), 6).unwrap() {
            return Err(format!("case {c}: text-only VLA generation differs from standard"));
        }
        let visual = g.prompt(w.config.vocab_size, 1, 16, 1.0);
        let gla = RunSpec::lazy(plan.with_mode(LazyMode::Gla));
        if !bitwise(&prefill(&w, &visual, &vla), &prefill(&w, &visual, &gla)) {
            return Err(format!("case {c}: visual-only VLA differs from GLA"));
        }
    }
    Ok("20 cases: text-only VLA = standard, visual-only VLA = GLA, bitwise".into())
}

fn lazy_layers(plan: &LazyPlan) -> Vec<usize> {
    plan.blocks.iter().flat_map(|b| b.lazy.iter().copied()).collect()
}

fn planner_behaviour() -> Outcome {
    let mut rng = SplitMix64::new(909);
    let epsilons = [0.01, 0.05, 0.1, 0.2, 0.3, 0.5, 0.69, 1.0];
    for i in 0..200 {
        let n = rng.range_inclusive(2, 24);
        let adjacent: Vec<f64> = (0..n - 1).map(|_| rng.next_f64() * std::f64::consts::LN_2).collect();
        let mut prev: Vec<usize> = Vec::new();
        for &eps in &epsilons {
            let lazy = lazy_layers(&plan_from_adjacent(&adjacent, eps, None, LazyMode::Gla).unwrap());
            if !prev.iter().all(|l| lazy.contains(l)) {
                return Err(format!("profile {i}: lazy set shrank when epsilon rose to {eps}"));
            }
            prev = lazy;
        }
    }
    let n = 16;
    let mut adjacent: Vec<f64> = (0..n - 1).map(|_| 1e-3 * rng.next_f64()).collect();
    adjacent[0] = 0.45;
    adjacent[1] = 0.30;
    adjacent[n - 2] = 0.40;
    let plan = plan_from_adjacent(&adjacent, 0.05, None, LazyMode::Gla).unwrap();
    let touched: Vec<usize> = plan.blocks.iter().flat_map(|b| b.anchor..=b.end()).collect();
    for l in [0, 1, n - 1] {
        if touched.contains(&l) {
            return Err(format!("layer {l} is in a block"));
        }
    }
    let frac = plan.lazy_fraction();
    if frac <= 0.5 {
        return Err(format!("lazy fraction {frac}"));
    }
    Ok(format!("epsilon-monotone over 200 profiles; shaped profile skips 0, 1, {} with lazy fraction {frac}", n - 1))
}

fn sanity_harness() -> Outcome {
    let w = init_synthetic_model(ModelConfig::new(8, 2, 16, 32, 48).unwrap(), 10).unwrap();
    let mut g = CaseGen::new(1010);
    let corpus: Vec<_> = (0..6).map(|_| g.prompt(48, 6, 14, 0.5)).collect();
    let profile = profile_model(&w, &corpus, ProfileOptions::default()).unwrap();
    let mut adjacent = profile.adjacent_profile();
    adjacent.sort_by(f64::total_cmp);
    // threshold just above the median pair keeps roughly half of the pairs
    let eps = (adjacent[adjacent.len() / 2] * (1.0 + 1e-9)).min(1.0);
    let threshold = lazyattn::planner::plan_from_profile(&profile, eps, None, LazyMode::Gla).unwrap();
    if threshold.blocks.is_empty() {
        return Err("threshold plan has no blocks".into());
    }
    let random = plan_random_matching(&threshold, 11).unwrap();
    let prompts: Vec<_> = (0..3).map(|_| g.prompt(48, 4, 12, 0.5)).collect();
    let rows = sanity_compare(&w, &prompts, &[("threshold", &threshold), ("random", &random)], 16).unwrap();
    if rows[0].n_blocks != rows[1].n_blocks || rows[0].n_lazy != rows[1].n_lazy {
        return Err("plans are not matched".into());
    }
    if !rows.iter().all(|r| r.oracle_ok) {
        return Err(format!("oracle verification failed: {rows:?}"));
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sanity.csv");
    lazyattn::fsutil::write_atomic(&path, sanity_csv(&rows).unwrap().as_bytes()).unwrap();
    let written = std::fs::read_to_string(&path).unwrap();
    let records = csv::Reader::from_reader(written.as_bytes()).records().count();
    if records != 2 {
        return Err(format!("csv has {records} rows"));
    }
    Ok(format!(
        "{} blocks / {} lazy layers each; both verify; csv written with {records} rows",
        rows[0].n_blocks, rows[0].n_lazy
    ))
}

fn throughput() -> Outcome {
    let n_layers = 16;
    let w = init_synthetic_model(ModelConfig::new(n_layers, 4, 256, 512, 256).unwrap(), 11).unwrap();
    let mut plan = LazyPlan::empty(n_layers, LazyMode::Gla);
    plan.blocks = (0..4).map(|b| LazyBlock::span(4 * b, 3)).collect();
    let cfg = BenchConfig { context_len: 2048, steps: 16, repeats: 5, seed: 12, visual_fraction: 0.5 };
    let std_stats = bench_decode(&w, None, &cfg).unwrap();
    let gla_stats = bench_decode(&w, Some(&plan), &cfg).unwrap();
    let summary = format!(
        "context {}, N {n_layers}, n/N {}: median standard {:.1} tok/s, gla {:.1} tok/s ({:.2}x); repeat cv {:.3} / {:.3}",
        cfg.context_len,
        plan.lazy_fraction(),
        std_stats.median,
        gla_stats.median,
        gla_stats.median / std_stats.median,
        std_stats.coefficient_of_variation(),
        gla_stats.coefficient_of_variation()
    );
    if gla_stats.median >= std_stats.median {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn pruning_compatibility() -> Outcome {
    let mut g = CaseGen::new(1212);
    for c in 0..10 {
        let (_, w) = g.model(8);
        let t = g.prompt(w.config.vocab_size, 2, 16, 0.6);
        let plan = g.plan(w.config.n_layers, if c % 2 == 0 { LazyMode::Gla } else { LazyMode::Vla }, 1);
        let layer = g.next_seed() as usize % w.config.n_layers;
        let keep = RunSpec::lazy(plan.clone()).with_prune(PruneRequest { layer, keep_ratio: 1.0 });
        if lazy_store(&w, &t, &keep) != lazy_store(&w, &t, &RunSpec::lazy(plan.clone())) {
            return Err(format!("case {c}: keep_ratio 1 changed the cache"));
        }
    }
    let cfg = OracleConfig::default();
    let (cases, steps) = (24, 16);
    let mut dropped = 0;
    for c in 0..cases {
        let (_, w) = g.model(8);
        let t = g.prompt(w.config.vocab_size, 4, 20, 0.6);
        let spec = match c % 3 {
            0 => RunSpec::standard(),
            1 => RunSpec::lazy(g.plan(w.config.n_layers, LazyMode::Gla, 2)),
            _ => RunSpec::lazy(g.plan(w.config.n_layers, LazyMode::Vla, 2)),
        };
        let layer = g.next_seed() as usize % w.config.n_layers;
        let keep_ratio = [0.25, 0.5, 0.75][c % 3];
        let spec = spec.with_prune(PruneRequest { layer, keep_ratio });
        let out = verify_case(&w, &t, &spec, steps, &cfg).unwrap();
        if let Some(m) = out.mismatch {
            return Err(format!("case {c}: {m:?}"));
        }
        let want = oracle_full_generate(&w, &t, spec.plan.as_ref(), Some((layer, keep_ratio)), steps).unwrap();
        if out.production_ids != want {
            return Err(format!("case {c}: ids differ from oracle_full_generate"));
        }
        let (_, s) = Session::prefill(&w, &t, &spec, &mut Instruments::new()).unwrap();
        dropped += s.prune_outcome().map_or(0, |p| p.dropped.len());
    }
    if dropped == 0 {
        return Err("no visual token was ever dropped".into());
    }
    Ok(format!(
        "keep_ratio 1 is a no-op; {cases} pruned cases ({dropped} tokens dropped) pass oracle and consistency checks"
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("mode identity under the empty plan", mode_identity),
        ("oracle equivalence", oracle_equivalence),
        ("GLA attention sharing", gla_sharing),
        ("prefill/decode consistency", prefill_decode_consistency),
        ("JS divergence values", js_values),
        ("KV savings formulas", kv_formulas),
        ("FLOPs savings", flops_savings),
        ("VLA degeneracies", vla_degeneracies),
        ("planner behaviour", planner_behaviour),
        ("sanity-check harness", sanity_harness),
        ("decode throughput direction", throughput),
        ("pruning compatibility", pruning_compatibility),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("PASS criterion {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
