//! Lazy-block plans: threshold grouping over the adjacent similarity profile,
//! the random-grouping baseline, and the plan file format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PlanError, Result};
use crate::fsutil::write_atomic;
use crate::profiler::SimilarityProfile;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LazyMode {
    Gla,
    Vla,
}

impl LazyMode {
    pub fn parse(s: &str) -> std::result::Result<Self, PlanError> {
        match s {
            "gla" => Ok(LazyMode::Gla),
            "vla" => Ok(LazyMode::Vla),
            other => Err(PlanError::UnknownMode(other.into())),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LazyMode::Gla => "gla",
            LazyMode::Vla => "vla",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanSource {
    Threshold,
    Random,
}

/// An anchor layer and the consecutive layers after it that reuse its
/// attention inputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LazyBlock {
    pub anchor: usize,
    pub lazy: Vec<usize>,
}

impl LazyBlock {
    /// Anchor plus `n_lazy` following layers.
    pub fn span(anchor: usize, n_lazy: usize) -> Self {
        Self { anchor, lazy: (anchor + 1..=anchor + n_lazy).collect() }
    }

    pub fn n(&self) -> usize {
        self.lazy.len()
    }

    /// Last layer covered by the block.
    pub fn end(&self) -> usize {
        self.lazy.last().copied().unwrap_or(self.anchor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LazyPlan {
    pub mode: LazyMode,
    pub epsilon: f64,
    pub n_layers: usize,
    pub source: PlanSource,
    pub seed: u64,
    pub blocks: Vec<LazyBlock>,
}

/// Role a layer plays under a plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRole {
    Standard,
    Anchor { block: usize },
    Lazy { block: usize, anchor: usize },
}

impl LazyPlan {
    /// No lazy layers; every runtime reduces to the standard one.
    pub fn empty(n_layers: usize, mode: LazyMode) -> Self {
        Self { mode, epsilon: 1.0, n_layers, source: PlanSource::Threshold, seed: 0, blocks: Vec::new() }
    }

    pub fn with_mode(mut self, mode: LazyMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn n_lazy(&self) -> usize {
        self.blocks.iter().map(LazyBlock::n).sum()
    }

    pub fn lazy_fraction(&self) -> f64 {
        plan_lazy_fraction(self)
    }

    pub fn roles(&self) -> Vec<LayerRole> {
        let mut roles = vec![LayerRole::Standard; self.n_layers];
        for (b, block) in self.blocks.iter().enumerate() {
            roles[block.anchor] = LayerRole::Anchor { block: b };
            for &l in &block.lazy {
                roles[l] = LayerRole::Lazy { block: b, anchor: block.anchor };
            }
        }
        roles
    }

    pub fn validate(&self) -> std::result::Result<(), PlanError> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(PlanError::Epsilon(self.epsilon));
        }
        for (b, block) in self.blocks.iter().enumerate() {
            if block.lazy.is_empty() {
                return Err(PlanError::EmptyBlock { block: b });
            }
            for (k, &l) in block.lazy.iter().enumerate() {
                if l != block.anchor + 1 + k {
                    return Err(PlanError::NonContiguous { block: b, anchor: block.anchor });
                }
            }
            if block.end() >= self.n_layers {
                return Err(PlanError::OutOfRange { block: b, layer: block.end(), n_layers: self.n_layers });
            }
        }
        for (b, pair) in self.blocks.windows(2).enumerate() {
            let (prev, next) = (&pair[0], &pair[1]);
            let overlaps = next.anchor <= prev.end() && prev.anchor <= next.end();
            if overlaps {
                return Err(PlanError::Overlapping { first: b, second: b + 1 });
            }
            if next.anchor < prev.anchor {
                return Err(PlanError::Unsorted { first: b, second: b + 1 });
            }
        }
        Ok(())
    }

    /// Validates the plan and checks it was built for a model of `n_layers`.
    pub fn check_for_model(&self, n_layers: usize) -> std::result::Result<(), PlanError> {
        self.validate()?;
        if self.n_layers != n_layers {
            return Err(PlanError::LayerCount { plan: self.n_layers, model: n_layers });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plan serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        // Mode and source strings get a dedicated error rather than serde's.
        if let Some(m) = raw.get("mode").and_then(|v| v.as_str()) {
            LazyMode::parse(m)?;
        }
        if let Some(s) = raw.get("source").and_then(|v| v.as_str()) {
            if s != "threshold" && s != "random" {
                return Err(PlanError::UnknownSource(s.into()).into());
            }
        }
        let plan: Self = serde_json::from_value(raw)?;
        plan.validate()?;
        Ok(plan)
    }
}

pub fn save_plan(plan: &LazyPlan, path: &Path) -> Result<()> {
    plan.validate()?;
    write_atomic(path, plan.to_json().as_bytes())
}

pub fn load_plan(path: &Path) -> Result<LazyPlan> {
    LazyPlan::from_json(&std::fs::read_to_string(path)?)
}

fn check_epsilon(epsilon: f64) -> std::result::Result<(), PlanError> {
    if epsilon > 0.0 && epsilon <= 1.0 {
        Ok(())
    } else {
        Err(PlanError::Epsilon(epsilon))
    }
}

/// Greedy left-to-right grouping of an adjacent-divergence vector
/// (`adjacent[i]` compares layers `i` and `i+1`). A block opens at the first
/// pair below `epsilon` and grows while the next pair is also below it and
/// the block stays within `max_span` layers.
pub fn plan_from_adjacent(
    adjacent: &[f64],
    epsilon: f64,
    max_span: Option<usize>,
    mode: LazyMode,
) -> std::result::Result<LazyPlan, PlanError> {
    check_epsilon(epsilon)?;
    if let Some(cap) = max_span {
        if cap < 2 {
            return Err(PlanError::MaxSpan(cap));
        }
    }
    let n_layers = adjacent.len() + 1;
    let cap = max_span.unwrap_or(usize::MAX);
    let mut blocks = Vec::new();
    let mut i = 0;
    while i + 1 < n_layers {
        if adjacent[i] < epsilon {
            let mut last = i + 1;
            while last + 1 < n_layers && adjacent[last] < epsilon && last + 1 - i < cap {
                last += 1;
            }
            blocks.push(LazyBlock::span(i, last - i));
            i = last + 1;
        } else {
            i += 1;
        }
    }
    Ok(LazyPlan { mode, epsilon, n_layers, source: PlanSource::Threshold, seed: 0, blocks })
}

pub fn plan_from_profile(
    profile: &SimilarityProfile,
    epsilon: f64,
    max_span: Option<usize>,
    mode: LazyMode,
) -> std::result::Result<LazyPlan, PlanError> {
    plan_from_adjacent(&profile.adjacent_profile(), epsilon, max_span, mode)
}

/// Places blocks of the given spans (anchor included, each ≥ 2) at uniformly
/// random disjoint positions. The order of blocks is shuffled, then the free
/// layers are split into gaps by a uniformly drawn composition.
pub fn plan_random(
    n_layers: usize,
    spans: &[usize],
    seed: u64,
    mode: LazyMode,
) -> std::result::Result<LazyPlan, PlanError> {
    if let Some(&bad) = spans.iter().find(|&&s| s < 2) {
        return Err(PlanError::MaxSpan(bad));
    }
    let used: usize = spans.iter().sum();
    if used > n_layers {
        return Err(PlanError::Infeasible { spans: spans.to_vec(), n_layers });
    }
    let mut rng = SplitMix64::new(seed);
    let mut order = spans.to_vec();
    rng.shuffle(&mut order);

    // Choose which of the `free + k` slots hold blocks; the rest are free layers.
    let k = order.len();
    let free = n_layers - used;
    let mut slots: Vec<usize> = (0..free + k).collect();
    rng.shuffle(&mut slots);
    let mut block_slots = slots[..k].to_vec();
    block_slots.sort_unstable();

    let mut blocks = Vec::with_capacity(k);
    let mut layer = 0;
    let mut next_block = 0;
    for slot in 0..free + k {
        if next_block < k && block_slots[next_block] == slot {
            let span = order[next_block];
            blocks.push(LazyBlock::span(layer, span - 1));
            layer += span;
            next_block += 1;
        } else {
            layer += 1;
        }
    }
    Ok(LazyPlan { mode, epsilon: 1.0, n_layers, source: PlanSource::Random, seed, blocks })
}

/// Random baseline with the same block spans as `reference`.
pub fn plan_random_matching(reference: &LazyPlan, seed: u64) -> std::result::Result<LazyPlan, PlanError> {
    let spans: Vec<usize> = reference.blocks.iter().map(|b| b.n() + 1).collect();
    plan_random(reference.n_layers, &spans, seed, reference.mode)
}

pub fn plan_lazy_fraction(plan: &LazyPlan) -> f64 {
    plan.n_lazy() as f64 / plan.n_layers as f64
}
