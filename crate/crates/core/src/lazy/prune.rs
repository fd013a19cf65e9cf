use super::cache::{KeyLayout, ModalityIndex, SharedCacheStore};
use crate::error::{Error, Result};
use crate::model::forward::KeySource;
use crate::model::Modality;
use crate::planner::{LayerRole, LazyMode};
use crate::profiler::AttentionSnapshot;

/// Result of a pruning pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    /// Layers after this one lost the dropped positions.
    pub after_layer: usize,
    /// Dropped visual positions, ascending.
    pub dropped: Vec<usize>,
    /// Positions still stored by the pruned layers.
    pub index: ModalityIndex,
}

/// Number of visual tokens kept: `ceil(keep_ratio * n_visual)`. A tiny
/// slack absorbs products like `0.3 * 10` landing just above an integer.
pub fn retained_count(n_visual: usize, keep_ratio: f64) -> usize {
    ((keep_ratio * n_visual as f64 - 1e-9).ceil().max(0.0) as usize).min(n_visual)
}

/// Visual positions ranked by descending score, ties to the lower position.
pub fn rank_visual(visual_positions: &[usize], scores: &[f64]) -> Vec<usize> {
    let mut ranked = visual_positions.to_vec();
    ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ranked
}

/// Drops the lowest-scoring visual positions from every layer after `layer`.
/// Scores are the head-averaged last-row attention of `layer` taken from the
/// prefill that built `store`; call before any decode step. Stored keys
/// keep their original rotation, so positions are not renumbered.
pub fn prune_visual_tokens(
    store: &mut SharedCacheStore,
    snapshot: &AttentionSnapshot,
    layer: usize,
    keep_ratio: f64,
) -> Result<PruneOutcome> {
    let n_layers = store.layers.len();
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::InvalidInput(format!("keep ratio {keep_ratio} outside (0, 1]")));
    }
    if layer >= n_layers {
        return Err(Error::InvalidInput(format!("prune layer {layer} out of range for {n_layers} layers")));
    }
    if snapshot.n_layers() != n_layers {
        return Err(Error::InvalidInput(format!("snapshot has {} layers, store has {n_layers}", snapshot.n_layers())));
    }
    if store.next_position != store.prompt_len {
        return Err(Error::CacheState("pruning must happen right after prefill".into()));
    }
    let scores = snapshot.last_row(layer);
    if scores.len() != store.prompt_len {
        return Err(Error::InvalidInput(format!(
            "snapshot covers {} positions, prompt has {}",
            scores.len(),
            store.prompt_len
        )));
    }

    let visual = store.layers[layer].modality_index().visual_positions;
    let keep = retained_count(visual.len(), keep_ratio);
    let mut dropped = rank_visual(&visual, scores).split_off(keep);
    dropped.sort_unstable();

    if !dropped.is_empty() {
        let is_dropped = |p: &usize| dropped.binary_search(p).is_ok();
        for ls in &mut store.layers[layer + 1..] {
            let positions = std::mem::take(&mut ls.positions);
            let keep_rows: Vec<bool> = positions.iter().map(|p| !is_dropped(p)).collect();
            for v in &mut ls.values {
                v.retain_rows(|r| keep_rows[r]);
            }
            let modality: Vec<Modality> =
                ls.modality.iter().zip(&keep_rows).filter_map(|(&m, &k)| k.then_some(m)).collect();
            ls.modality = modality;
            ls.positions = positions.into_iter().filter(|p| !is_dropped(p)).collect();

            let key_keep: Vec<bool> = ls.key_positions.iter().map(|p| !is_dropped(p)).collect();
            for k in &mut ls.keys {
                k.retain_rows(|r| key_keep[r]);
            }
            ls.key_positions.retain(|p| !is_dropped(p));
        }
        for l in layer + 1..n_layers {
            let LayerRole::Lazy { anchor, .. } = store.layers[l].role else {
                continue;
            };
            let layout = relink(store, l, anchor);
            store.layers[l].layout = layout;
        }
    }

    let index = store.layers[(layer + 1).min(n_layers - 1)].modality_index();
    Ok(PruneOutcome { after_layer: layer, dropped, index })
}

/// Rebuilds a lazy layer's key lookup after its positions changed.
fn relink(store: &SharedCacheStore, l: usize, anchor: usize) -> KeyLayout {
    let ls = &store.layers[l];
    let anchor_positions = &store.layers[anchor].positions;
    let sources: Vec<KeySource> = ls
        .positions
        .iter()
        .map(|p| match ls.key_positions.binary_search(p) {
            Ok(r) => KeySource::Own(r),
            Err(_) => KeySource::Anchor(
                anchor_positions.binary_search(p).expect("anchor stores every position its lazy layers read"),
            ),
        })
        .collect();
    let dense = store.mode == LazyMode::Gla
        && sources.len() == anchor_positions.len()
        && sources.iter().enumerate().all(|(i, s)| *s == KeySource::Anchor(i));
    if dense {
        KeyLayout::AnchorDense
    } else {
        KeyLayout::Gathered(sources)
    }
}
