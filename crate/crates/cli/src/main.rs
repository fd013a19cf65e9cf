//! `lazyattn`: generate a synthetic model, profile layer similarity, plan
//! lazy blocks, then run, verify and benchmark them.
//!
//! Exit codes: 0 success, 1 validation, 2 oracle mismatch, 3 I/O.

mod svg;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use lazyattn::efficiency::{bench_decode, meter_generate, BenchConfig, BenchStats};
use lazyattn::fsutil::write_atomic;
use lazyattn::model::read_token_sequences;
use lazyattn::oracle::OracleConfig;
use lazyattn::planner::{load_plan, plan_from_profile, plan_random, plan_random_matching, save_plan, LazyMode};
use lazyattn::profiler::{profile_model, ProfileOptions, SimilarityProfile};
use lazyattn::rng::SplitMix64;
use lazyattn::session::{PruneRequest, RunMode, RunSpec};
use lazyattn::verify::{sanity_compare, sanity_csv, verify_case, CaseGen};
use lazyattn::{
    init_synthetic_model, load_checkpoint, save_checkpoint, Error, ModelConfig, ModelWeights, TokenSequence,
};

#[derive(Parser)]
#[command(name = "lazyattn", version, about = "Cross-layer attention sharing on a small decoder-only transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic checkpoint
    Genmodel(GenmodelArgs),
    /// Measure layer-to-layer attention similarity over a corpus
    Profile(ProfileArgs),
    /// Build a lazy plan from a profile, or a random one
    Plan(PlanArgs),
    /// Greedy generation with a cost report
    Run(RunArgs),
    /// Check the runtimes against the recompute oracle on random prompts
    Verify(VerifyArgs),
    /// Time decode steps after a long prompt
    Bench(BenchArgs),
    /// Compare a threshold plan with a random plan of matching shape
    Sanity(SanityArgs),
}

fn parse_lazy_mode(s: &str) -> std::result::Result<LazyMode, String> {
    LazyMode::parse(s).map_err(|e| e.to_string())
}

fn parse_run_mode(s: &str) -> std::result::Result<RunMode, String> {
    RunMode::parse(s).map_err(|e| e.to_string())
}

#[derive(Args)]
struct GenmodelArgs {
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    dmodel: usize,
    #[arg(long, default_value_t = 128)]
    dff: usize,
    #[arg(long, default_value_t = 256)]
    vocab: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    model: PathBuf,
    /// JSON Lines prompts: {"tokens":[...],"modality":[0|1,...]}
    #[arg(long)]
    inputs: PathBuf,
    /// Output directory for profile.json, adjacent.csv and similarity.svg
    #[arg(long)]
    out: PathBuf,
    /// Average full attention matrices instead of last rows
    #[arg(long)]
    full_matrix: bool,
    #[arg(long)]
    svg: bool,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct PlanArgs {
    /// Similarity profile JSON (threshold planning)
    #[arg(long, conflicts_with = "random")]
    sim: Option<PathBuf>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, value_parser = parse_lazy_mode, default_value = "gla")]
    mode: LazyMode,
    /// Largest block, anchor included
    #[arg(long)]
    max_span: Option<usize>,
    /// Random block placement instead of thresholding
    #[arg(long)]
    random: bool,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    /// Block spans, anchor included; one value is repeated `--blocks` times
    #[arg(long, value_delimiter = ',')]
    spans: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct PruneArgs {
    /// Evict visual tokens from the caches of layers after this one
    #[arg(long, requires = "prune_keep")]
    prune_layer: Option<usize>,
    /// Share of visual tokens kept, in (0, 1]
    #[arg(long, requires = "prune_layer")]
    prune_keep: Option<f64>,
}

impl PruneArgs {
    fn request(&self) -> Option<PruneRequest> {
        Some(PruneRequest { layer: self.prune_layer?, keep_ratio: self.prune_keep? })
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    model: PathBuf,
    /// JSON Lines prompts
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_parser = parse_run_mode, default_value = "standard")]
    mode: RunMode,
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Generated ids per prompt
    #[arg(long, default_value_t = 16)]
    steps: usize,
    #[command(flatten)]
    prune: PruneArgs,
    /// Directory for report.json and manifest.json
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Defaults to the plan's mode, or standard without a plan
    #[arg(long, value_parser = parse_run_mode)]
    mode: Option<RunMode>,
    #[arg(long)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    steps: usize,
    #[arg(long, default_value_t = 24)]
    max_len: usize,
    /// Probability that a prompt position is visual
    #[arg(long, default_value_t = 0.5)]
    visual_prob: f64,
    #[command(flatten)]
    prune: PruneArgs,
    /// Where to write the repro record on a mismatch
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, value_parser = parse_run_mode, default_value = "standard")]
    mode: RunMode,
    #[arg(long, default_value_t = 2048)]
    context: usize,
    #[arg(long, default_value_t = 16)]
    steps: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Leading share of the prompt labelled visual
    #[arg(long, default_value_t = 0.5)]
    visual_fraction: f64,
    /// Earlier bench CSV to compute speedups against
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SanityArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    sim: PathBuf,
    #[arg(long)]
    epsilon: f64,
    #[arg(long, value_parser = parse_lazy_mode, default_value = "gla")]
    mode: LazyMode,
    #[arg(long)]
    max_span: Option<usize>,
    /// JSON Lines prompts to compare on
    #[arg(long)]
    inputs: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    steps: usize,
    /// Comparison CSV
    #[arg(long)]
    out: PathBuf,
    /// Also write threshold.json and random.json here
    #[arg(long)]
    plans_dir: Option<PathBuf>,
}

fn load_model(path: &Path) -> Result<ModelWeights> {
    load_checkpoint(path).with_context(|| format!("loading model from {}", path.display()))
}

fn load_inputs(path: &Path, weights: &ModelWeights) -> Result<Vec<TokenSequence>> {
    let seqs = read_token_sequences(path).with_context(|| format!("reading prompts from {}", path.display()))?;
    if seqs.is_empty() {
        return Err(Error::InvalidInput(format!("{} holds no prompts", path.display())).into());
    }
    let vocab = weights.config.vocab_size;
    for (i, s) in seqs.iter().enumerate() {
        if s.is_empty() {
            return Err(Error::InvalidInput(format!("prompt {i} is empty")).into());
        }
        if let Some(&t) = s.token_ids().iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::InvalidInput(format!("prompt {i}: token {t} outside vocabulary of {vocab}")).into());
        }
    }
    Ok(seqs)
}

/// The `RunSpec` for `mode`, with the plan's blocks applied in that mode.
fn resolve_spec(
    mode: RunMode,
    plan: Option<&Path>,
    weights: &ModelWeights,
    prune: Option<PruneRequest>,
) -> Result<RunSpec> {
    let plan = match (mode.lazy(), plan) {
        (None, None) => None,
        (None, Some(_)) => bail!("--plan needs --mode gla or vla"),
        (Some(_), None) => bail!("--mode {} needs --plan", mode.as_str()),
        (Some(m), Some(path)) => {
            let p = load_plan(path).with_context(|| format!("loading plan {}", path.display()))?;
            p.check_for_model(weights.config.n_layers).map_err(Error::from)?;
            Some(p.with_mode(m))
        }
    };
    if let Some(req) = prune {
        if !(req.keep_ratio > 0.0 && req.keep_ratio <= 1.0) {
            return Err(Error::InvalidInput(format!("--prune-keep {} outside (0, 1]", req.keep_ratio)).into());
        }
        if req.layer >= weights.config.n_layers {
            return Err(Error::InvalidInput(format!(
                "--prune-layer {} out of range for {} layers",
                req.layer, weights.config.n_layers
            ))
            .into());
        }
    }
    Ok(RunSpec { plan, prune })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::from)?;
    }
    write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// One stdout line. A closed pipe (`| head`) is not an error; the run still
/// finishes and writes its report.
fn emit(line: &str) -> Result<()> {
    match writeln!(io::stdout().lock(), "{line}") {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(Error::Io(e).into()),
        _ => Ok(()),
    }
}

fn cmd_genmodel(a: GenmodelArgs) -> Result<()> {
    let config = ModelConfig::new(a.layers, a.heads, a.dmodel, a.dff, a.vocab)?;
    let weights = init_synthetic_model(config, a.seed)?;
    save_checkpoint(&weights, &a.out).with_context(|| format!("writing checkpoint to {}", a.out.display()))?;
    println!("wrote {} ({} parameters)", a.out.display(), weights.config.param_count());
    Ok(())
}

fn cmd_profile(a: ProfileArgs) -> Result<()> {
    let weights = load_model(&a.model)?;
    let corpus = load_inputs(&a.inputs, &weights)?;
    if a.threads == 0 {
        bail!("--threads must be at least 1");
    }
    let opts = ProfileOptions { full_matrix: a.full_matrix, threads: a.threads };
    let profile = profile_model(&weights, &corpus, opts)?;
    let csv = profile.adjacent_csv()?;
    write_file(&a.out.join("profile.json"), profile.to_json().as_bytes())?;
    write_file(&a.out.join("adjacent.csv"), csv.as_bytes())?;
    if a.svg {
        let view = profile.similarity_view();
        let image = svg::heatmap(&view, std::f64::consts::LN_2, "ln 2 - JS divergence between layers");
        write_file(&a.out.join("similarity.svg"), image.as_bytes())?;
    }
    println!("profiled {} layers over {} prompts into {}", profile.n_layers, profile.n_samples, a.out.display());
    Ok(())
}

fn cmd_plan(a: PlanArgs) -> Result<()> {
    let plan = if a.random {
        let Some(n_layers) = a.layers else {
            bail!("--random needs --layers");
        };
        if a.spans.is_empty() {
            bail!("--random needs --spans");
        }
        let spans = match (a.blocks, a.spans.len()) {
            (None, _) => a.spans.clone(),
            (Some(b), 1) => vec![a.spans[0]; b],
            (Some(b), n) if b == n => a.spans.clone(),
            (Some(b), n) => bail!("--blocks {b} does not match {n} spans"),
        };
        plan_random(n_layers, &spans, a.seed, a.mode).map_err(Error::from)?
    } else {
        let (Some(sim), Some(eps)) = (&a.sim, a.epsilon) else {
            bail!("threshold planning needs --sim and --epsilon (or use --random)");
        };
        let profile = SimilarityProfile::load(sim).with_context(|| format!("loading profile {}", sim.display()))?;
        plan_from_profile(&profile, eps, a.max_span, a.mode).map_err(Error::from)?
    };
    save_plan(&plan, &a.out).with_context(|| format!("writing plan {}", a.out.display()))?;
    let blocks: Vec<String> = plan.blocks.iter().map(|b| format!("{}..={}", b.anchor, b.end())).collect();
    println!("{} blocks [{}], {} of {} layers lazy", plan.blocks.len(), blocks.join(" "), plan.n_lazy(), plan.n_layers);
    Ok(())
}

/// Validated inputs of one `run` invocation.
struct RunManifest {
    model: PathBuf,
    plan: Option<PathBuf>,
    input: PathBuf,
    out: Option<PathBuf>,
    weights: ModelWeights,
    prompts: Vec<TokenSequence>,
    spec: RunSpec,
}

impl RunManifest {
    fn open(a: &RunArgs) -> Result<Self> {
        if a.steps == 0 {
            bail!("--steps must be at least 1");
        }
        let weights = load_model(&a.model)?;
        let spec = resolve_spec(a.mode, a.plan.as_deref(), &weights, a.prune.request())?;
        let prompts = load_inputs(&a.input, &weights)?;
        Ok(Self {
            model: a.model.clone(),
            plan: a.plan.clone(),
            input: a.input.clone(),
            out: a.out.clone(),
            weights,
            prompts,
            spec,
        })
    }

    fn to_json(&self) -> serde_json::Value {
        json!({
            "model": self.model,
            "plan": self.plan,
            "input": self.input,
            "mode": self.spec.mode(),
            "output": self.out,
            "prune": self.spec.prune.map(|p| json!({"layer": p.layer, "keep_ratio": p.keep_ratio})),
        })
    }
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let m = RunManifest::open(&a)?;
    let mut reports = Vec::new();
    for p in &m.prompts {
        let (report, ids) = meter_generate(&m.weights, p, &m.spec, a.steps - 1)?;
        let ids: Vec<String> = ids.iter().map(u32::to_string).collect();
        emit(&ids.join(" "))?;
        reports.push(report);
    }
    if let Some(dir) = &m.out {
        let report = serde_json::to_string_pretty(&reports)? + "\n";
        write_file(&dir.join("report.json"), report.as_bytes())?;
        let manifest = serde_json::to_string_pretty(&m.to_json())? + "\n";
        write_file(&dir.join("manifest.json"), manifest.as_bytes())?;
    }
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> Result<()> {
    if a.cases == 0 {
        bail!("--cases must be at least 1");
    }
    if a.steps == 0 || a.max_len < 2 {
        bail!("--steps must be at least 1 and --max-len at least 2");
    }
    if !(0.0..=1.0).contains(&a.visual_prob) {
        bail!("--visual-prob {} outside [0, 1]", a.visual_prob);
    }
    let weights = load_model(&a.model)?;
    let plan = match &a.plan {
        Some(p) => Some(load_plan(p).with_context(|| format!("loading plan {}", p.display()))?),
        None => None,
    };
    let mode = a.mode.unwrap_or_else(|| plan.as_ref().map_or(RunMode::Standard, |p| p.mode.into()));
    let spec = resolve_spec(mode, a.plan.as_deref(), &weights, a.prune.request())?;
    let cfg = OracleConfig::default();
    let mut seeds = SplitMix64::new(a.seed);
    for case in 0..a.cases {
        let case_seed = seeds.next_u64();
        let prompt = CaseGen::new(case_seed).prompt(weights.config.vocab_size, 2, a.max_len, a.visual_prob);
        let outcome = verify_case(&weights, &prompt, &spec, a.steps, &cfg)?;
        if let Some(m) = outcome.mismatch {
            let repro = json!({
                "model": a.model,
                "plan": a.plan,
                "mode": mode,
                "seed": a.seed,
                "case": case,
                "case_seed": case_seed,
                "prompt": serde_json::from_str::<serde_json::Value>(&prompt.to_json_line())?,
                "check": m.check,
                "step": m.step,
                "layer": m.layer,
                "detail": m.detail,
                "production_ids": outcome.production_ids,
                "oracle_ids": outcome.oracle_ids,
            });
            let text = serde_json::to_string_pretty(&repro)? + "\n";
            eprint!("{text}");
            if let Some(path) = &a.dump {
                write_file(path, text.as_bytes())?;
            }
            return Err(Error::OracleMismatch(format!("case {case}: {}", m.detail)).into());
        }
    }
    println!("{} cases verified in {} mode ({} steps each)", a.cases, mode.as_str(), a.steps);
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let cfg = BenchConfig {
        context_len: a.context,
        steps: a.steps,
        repeats: a.repeats,
        seed: a.seed,
        visual_fraction: a.visual_fraction,
    };
    cfg.validate()?;
    let weights = load_model(&a.model)?;
    let spec = resolve_spec(a.mode, a.plan.as_deref(), &weights, None)?;
    let baseline = match &a.baseline {
        Some(p) => {
            let text =
                fs::read_to_string(p).map_err(Error::from).with_context(|| format!("reading {}", p.display()))?;
            Some(BenchStats::from_csv(&text)?)
        }
        None => None,
    };
    let stats = bench_decode(&weights, spec.plan.as_ref(), &cfg)?;
    write_file(&a.out, stats.to_csv(baseline.as_ref())?.as_bytes())?;
    let speedup = baseline.as_ref().map_or(String::new(), |b| format!(", {:.3}x baseline", stats.median / b.median));
    let noisy = if stats.is_stable() { "" } else { " (noisy: repeats vary by more than 20%)" };
    println!("{}: median {:.2} tokens/s over {} repeats{speedup}{noisy}", a.mode.as_str(), stats.median, a.repeats);
    Ok(())
}

fn cmd_sanity(a: SanityArgs) -> Result<()> {
    if a.steps == 0 {
        bail!("--steps must be at least 1");
    }
    let weights = load_model(&a.model)?;
    let profile = SimilarityProfile::load(&a.sim).with_context(|| format!("loading profile {}", a.sim.display()))?;
    if profile.n_layers != weights.config.n_layers {
        return Err(Error::DimensionMismatch(format!(
            "profile covers {} layers, model has {}",
            profile.n_layers, weights.config.n_layers
        ))
        .into());
    }
    let prompts = load_inputs(&a.inputs, &weights)?;
    let threshold = plan_from_profile(&profile, a.epsilon, a.max_span, a.mode).map_err(Error::from)?;
    if threshold.blocks.is_empty() {
        bail!("epsilon {} yields no lazy blocks; nothing to compare", a.epsilon);
    }
    let random = plan_random_matching(&threshold, a.seed).map_err(Error::from)?;
    let rows = sanity_compare(&weights, &prompts, &[("threshold", &threshold), ("random", &random)], a.steps)?;
    write_file(&a.out, sanity_csv(&rows)?.as_bytes())?;
    if let Some(dir) = &a.plans_dir {
        write_file(&dir.join("threshold.json"), threshold.to_json().as_bytes())?;
        write_file(&dir.join("random.json"), random.to_json().as_bytes())?;
    }
    for r in &rows {
        println!(
            "{:<9} blocks {} lazy {} kv -{:.1}% flops -{:.1}% agreement {:.3} oracle {}",
            r.source,
            r.n_blocks,
            r.n_lazy,
            100.0 * r.kv_savings,
            100.0 * r.flops_savings,
            r.token_agreement,
            if r.oracle_ok { "ok" } else { "MISMATCH" }
        );
    }
    if let Some(bad) = rows.iter().find(|r| !r.oracle_ok) {
        return Err(Error::OracleMismatch(format!("{} plan failed verification", bad.source)).into());
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::OracleMismatch(_) => 2,
                Error::Io(_) => 3,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Genmodel(a) => cmd_genmodel(a),
        Command::Profile(a) => cmd_profile(a),
        Command::Plan(a) => cmd_plan(a),
        Command::Run(a) => cmd_run(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Sanity(a) => cmd_sanity(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
