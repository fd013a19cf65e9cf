//! One request end to end: prefill in the chosen mode, optional visual-token
//! pruning, then greedy decode steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lazy::{decode_lazy_with, prefill_lazy_with, prune_visual_tokens, PruneOutcome, QCache, SharedCacheStore};
use crate::model::{decode_standard_with, prefill_standard_with, Instruments, KvCache, ModelWeights, TokenSequence};
use crate::planner::{LazyMode, LazyPlan};
use crate::profiler::SnapshotCollector;
use crate::tensor::{argmax, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Standard,
    Gla,
    Vla,
}

impl RunMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(RunMode::Standard),
            "gla" => Ok(RunMode::Gla),
            "vla" => Ok(RunMode::Vla),
            other => Err(Error::InvalidInput(format!("unknown mode {other:?} (expected standard, gla or vla)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Standard => "standard",
            RunMode::Gla => "gla",
            RunMode::Vla => "vla",
        }
    }

    pub fn lazy(self) -> Option<LazyMode> {
        match self {
            RunMode::Standard => None,
            RunMode::Gla => Some(LazyMode::Gla),
            RunMode::Vla => Some(LazyMode::Vla),
        }
    }
}

impl From<LazyMode> for RunMode {
    fn from(m: LazyMode) -> Self {
        match m {
            LazyMode::Gla => RunMode::Gla,
            LazyMode::Vla => RunMode::Vla,
        }
    }
}

/// Drop visual tokens after `layer`, keeping a `keep_ratio` share.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneRequest {
    pub layer: usize,
    pub keep_ratio: f64,
}

/// What to run: the standard runtime when `plan` is `None`, otherwise the
/// lazy runtime in the plan's mode.
#[derive(Debug, Clone, Default)]
pub struct RunSpec {
    pub plan: Option<LazyPlan>,
    pub prune: Option<PruneRequest>,
}

impl RunSpec {
    pub fn standard() -> Self {
        Self::default()
    }

    pub fn lazy(plan: LazyPlan) -> Self {
        Self { plan: Some(plan), prune: None }
    }

    pub fn with_prune(mut self, prune: PruneRequest) -> Self {
        self.prune = Some(prune);
        self
    }

    pub fn mode(&self) -> RunMode {
        self.plan.as_ref().map_or(RunMode::Standard, |p| p.mode.into())
    }
}

#[derive(Debug, Clone)]
enum State {
    Standard(KvCache),
    Lazy { store: SharedCacheStore, qcache: QCache },
}

/// Caches of one in-flight request.
#[derive(Debug, Clone)]
pub struct Session {
    state: State,
    prune: Option<PruneOutcome>,
}

impl Session {
    /// Prefills `tokens` and returns the per-position logits with the session.
    /// Pruning runs the lazy runtime even in standard mode, with an empty plan.
    pub fn prefill(
        weights: &ModelWeights,
        tokens: &TokenSequence,
        spec: &RunSpec,
        inst: &mut Instruments<'_>,
    ) -> Result<(Matrix, Self)> {
        let n_layers = weights.config.n_layers;
        if let Some(req) = spec.prune {
            let plan = spec.plan.clone().unwrap_or_else(|| LazyPlan::empty(n_layers, LazyMode::Gla));
            let mut collector = SnapshotCollector::new(false);
            let mut observed = Instruments::with_observer(&mut collector);
            let out = prefill_lazy_with(weights, tokens, &plan, &mut observed)?;
            inst.flops.absorb(&observed.flops);
            let mut store = out.store;
            let outcome = prune_visual_tokens(&mut store, &collector.finish(), req.layer, req.keep_ratio)?;
            return Ok((out.logits, Self { state: State::Lazy { store, qcache: out.qcache }, prune: Some(outcome) }));
        }
        match &spec.plan {
            None => {
                let (logits, cache) = prefill_standard_with(weights, tokens, inst)?;
                Ok((logits, Self { state: State::Standard(cache), prune: None }))
            }
            Some(plan) => {
                let out = prefill_lazy_with(weights, tokens, plan, inst)?;
                Ok((out.logits, Self { state: State::Lazy { store: out.store, qcache: out.qcache }, prune: None }))
            }
        }
    }

    pub fn step(&mut self, weights: &ModelWeights, token: u32, inst: &mut Instruments<'_>) -> Result<Vec<f32>> {
        match &mut self.state {
            State::Standard(cache) => decode_standard_with(weights, cache, token, inst),
            State::Lazy { store, qcache } => decode_lazy_with(weights, store, qcache, token, inst),
        }
    }

    pub fn kv_bytes(&self) -> usize {
        match &self.state {
            State::Standard(cache) => cache.bytes(),
            State::Lazy { store, .. } => store.kv_bytes(),
        }
    }

    pub fn qcache_peak_bytes(&self) -> usize {
        match &self.state {
            State::Standard(_) => 0,
            State::Lazy { qcache, .. } => qcache.peak_bytes(),
        }
    }

    pub fn lazy_store(&self) -> Option<&SharedCacheStore> {
        match &self.state {
            State::Standard(_) => None,
            State::Lazy { store, .. } => Some(store),
        }
    }

    pub fn prune_outcome(&self) -> Option<&PruneOutcome> {
        self.prune.as_ref()
    }
}

/// Greedy generation of `steps` ids: the first from the prefill's last row,
/// the rest from decode steps.
pub fn generate(weights: &ModelWeights, tokens: &TokenSequence, spec: &RunSpec, steps: usize) -> Result<Vec<u32>> {
    let mut inst = Instruments::new();
    generate_with(weights, tokens, spec, steps, &mut inst).map(|(ids, _)| ids)
}

pub fn generate_with(
    weights: &ModelWeights,
    tokens: &TokenSequence,
    spec: &RunSpec,
    steps: usize,
    inst: &mut Instruments<'_>,
) -> Result<(Vec<u32>, Session)> {
    if steps == 0 {
        return Err(Error::InvalidInput("steps must be at least 1".into()));
    }
    let (logits, mut session) = Session::prefill(weights, tokens, spec, inst)?;
    let mut ids = vec![argmax(logits.row(logits.rows() - 1)) as u32];
    while ids.len() < steps {
        let row = session.step(weights, *ids.last().expect("non-empty"), inst)?;
        ids.push(argmax(&row) as u32);
    }
    Ok((ids, session))
}
