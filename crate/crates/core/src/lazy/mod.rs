//! Lazy-attention runtimes. Anchor layers publish their post-rotation
//! queries to a [`QCache`] and keep their keys; lazy layers in the same block
//! read both instead of projecting their own (GLA), or do so only for visual
//! positions (VLA). Values, output projection and MLP stay per layer.

mod cache;
mod prune;
mod runtime;

pub use cache::{LayerStore, ModalityIndex, QCache, SharedCacheStore};
pub use prune::{prune_visual_tokens, rank_visual, retained_count, PruneOutcome};
pub use runtime::{decode_gla, decode_lazy_with, decode_vla, prefill_gla, prefill_lazy_with, prefill_vla, LazyPrefill};

use crate::error::Result;
use crate::model::{Instruments, ModelWeights, TokenSequence};
use crate::planner::LazyPlan;
use crate::profiler::{AttentionSnapshot, SnapshotCollector};

/// Lazy prefill that also records the head-averaged last-row attention of
/// every layer, as needed for pruning.
pub fn prefill_with_snapshot(
    weights: &ModelWeights,
    tokens: &TokenSequence,
    plan: &LazyPlan,
) -> Result<(LazyPrefill, AttentionSnapshot)> {
    let mut collector = SnapshotCollector::new(false);
    let out = prefill_lazy_with(weights, tokens, plan, &mut Instruments::with_observer(&mut collector))?;
    Ok((out, collector.finish()))
}
