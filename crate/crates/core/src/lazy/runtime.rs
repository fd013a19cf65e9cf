use super::cache::{KeyLayout, LayerStore, ModalityIndex, QCache, SharedCacheStore};
use crate::error::{Error, Result};
use crate::model::forward::{
    attend_heads, attn_input, embed, finish_layer, output_logits, project, rotated_heads, Instruments, KeySource, Keys,
    Op,
};
use crate::model::{Modality, ModelWeights, TokenSequence};
use crate::planner::{LayerRole, LazyMode, LazyPlan};
use crate::tensor::Matrix;

/// Output of a lazy prefill. The query cache comes back released; its
/// `peak_bytes` records the prefill footprint.
#[derive(Debug, Clone)]
pub struct LazyPrefill {
    pub logits: Matrix,
    pub store: SharedCacheStore,
    pub qcache: QCache,
}

fn require_mode(plan: &LazyPlan, mode: LazyMode) -> Result<()> {
    if plan.mode != mode {
        return Err(Error::InvalidInput(format!("plan mode is {}, runtime is {}", plan.mode.as_str(), mode.as_str())));
    }
    Ok(())
}

pub fn prefill_gla(weights: &ModelWeights, tokens: &TokenSequence, plan: &LazyPlan) -> Result<LazyPrefill> {
    require_mode(plan, LazyMode::Gla)?;
    prefill_lazy_with(weights, tokens, plan, &mut Instruments::new())
}

pub fn prefill_vla(weights: &ModelWeights, tokens: &TokenSequence, plan: &LazyPlan) -> Result<LazyPrefill> {
    require_mode(plan, LazyMode::Vla)?;
    prefill_lazy_with(weights, tokens, plan, &mut Instruments::new())
}

fn stale_qcache(layer: usize, block: usize) -> Error {
    Error::CacheState(format!("layer {layer} expects anchor queries of block {block} in the query cache"))
}

/// Prefill under `plan` in the plan's own mode.
pub fn prefill_lazy_with(
    weights: &ModelWeights,
    tokens: &TokenSequence,
    plan: &LazyPlan,
    inst: &mut Instruments<'_>,
) -> Result<LazyPrefill> {
    let cfg = &weights.config;
    plan.check_for_model(cfg.n_layers)?;
    tokens.check_vocab(cfg.vocab_size)?;
    let (nh, dh, scale, theta) = (cfg.n_heads, cfg.d_head, cfg.attention_scale(), cfg.rope_theta);
    let s = tokens.len();
    let all: Vec<usize> = (0..s).collect();
    let rope_all: Vec<i64> = (0..s as i64).collect();
    let index = ModalityIndex::from_modality(tokens.modality());
    let roles = plan.roles();

    let mut qcache = QCache::new();
    let mut layers: Vec<LayerStore> = Vec::with_capacity(cfg.n_layers);
    let mut x = embed(weights, tokens.token_ids());
    for (l, lw) in weights.layers.iter().enumerate() {
        let h = attn_input(weights, l, &x);
        let (outs, values, keys, key_positions, layout) = match roles[l] {
            LayerRole::Standard | LayerRole::Anchor { .. } => {
                let q = rotated_heads(&project(&mut inst.flops, Op::QProj, &h, &lw.wq), nh, &rope_all, theta);
                let k = rotated_heads(&project(&mut inst.flops, Op::KProj, &h, &lw.wk), nh, &rope_all, theta);
                let v = project(&mut inst.flops, Op::VProj, &h, &lw.wv).split_cols(nh);
                if let LayerRole::Anchor { block } = roles[l] {
                    let shared = match plan.mode {
                        LazyMode::Gla => q.clone(),
                        LazyMode::Vla => q.iter().map(|m| m.select_rows(&index.visual_positions)).collect(),
                    };
                    qcache.publish(block, shared);
                }
                let outs = attend_heads(inst, l, &q, |hd| Keys::Dense(&k[hd]), &v, scale);
                (outs, v, k, all.clone(), KeyLayout::Own)
            }
            LayerRole::Lazy { block, anchor } => {
                if qcache.block() != Some(block) {
                    return Err(stale_qcache(l, block));
                }
                let anchor_keys = &layers[anchor].keys;
                match plan.mode {
                    LazyMode::Gla => {
                        let v = project(&mut inst.flops, Op::VProj, &h, &lw.wv).split_cols(nh);
                        let outs =
                            attend_heads(inst, l, qcache.queries(), |hd| Keys::Dense(&anchor_keys[hd]), &v, scale);
                        (outs, v, vec![Matrix::with_cols(dh); nh], Vec::new(), KeyLayout::AnchorDense)
                    }
                    LazyMode::Vla => {
                        let text = &index.text_positions;
                        let ht = h.select_rows(text);
                        let rope_text: Vec<i64> = text.iter().map(|&p| p as i64).collect();
                        let qt =
                            rotated_heads(&project(&mut inst.flops, Op::QProj, &ht, &lw.wq), nh, &rope_text, theta);
                        let kt =
                            rotated_heads(&project(&mut inst.flops, Op::KProj, &ht, &lw.wk), nh, &rope_text, theta);
                        let v = project(&mut inst.flops, Op::VProj, &h, &lw.wv).split_cols(nh);
                        let shared = qcache.queries();
                        let mut q = vec![Matrix::with_cols(dh); nh];
                        let mut sources = Vec::with_capacity(s);
                        let (mut ti, mut vi) = (0, 0);
                        for (p, m) in tokens.modality().iter().enumerate() {
                            match m {
                                Modality::Text => {
                                    for (qh, src) in q.iter_mut().zip(&qt) {
                                        qh.push_row(src.row(ti));
                                    }
                                    sources.push(KeySource::Own(ti));
                                    ti += 1;
                                }
                                Modality::Visual => {
                                    for (qh, src) in q.iter_mut().zip(shared) {
                                        qh.push_row(src.row(vi));
                                    }
                                    sources.push(KeySource::Anchor(p));
                                    vi += 1;
                                }
                            }
                        }
                        let outs = attend_heads(
                            inst,
                            l,
                            &q,
                            |hd| Keys::Gather { own: &kt[hd], anchor: &anchor_keys[hd], sources: &sources },
                            &v,
                            scale,
                        );
                        (outs, v, kt, text.clone(), KeyLayout::Gathered(sources))
                    }
                }
            }
        };
        x = finish_layer(&mut inst.flops, lw, cfg.norm_eps, &x, &outs);
        inst.layer_output(l, &x);
        layers.push(LayerStore {
            role: roles[l],
            keys,
            values,
            positions: all.clone(),
            modality: tokens.modality().to_vec(),
            key_positions,
            layout,
        });
    }
    qcache.release();
    let logits = output_logits(&mut inst.flops, weights, &x);
    Ok(LazyPrefill {
        logits,
        store: SharedCacheStore { mode: plan.mode, layers, next_position: s, prompt_len: s },
        qcache,
    })
}

pub fn decode_gla(
    weights: &ModelWeights,
    store: &mut SharedCacheStore,
    qcache: &mut QCache,
    next_token: u32,
) -> Result<Vec<f32>> {
    if store.mode != LazyMode::Gla {
        return Err(Error::CacheState("decode_gla called on a VLA store".into()));
    }
    decode_lazy_with(weights, store, qcache, next_token, &mut Instruments::new())
}

pub fn decode_vla(weights: &ModelWeights, store: &mut SharedCacheStore, next_token: u32) -> Result<Vec<f32>> {
    if store.mode != LazyMode::Vla {
        return Err(Error::CacheState("decode_vla called on a GLA store".into()));
    }
    decode_lazy_with(weights, store, &mut QCache::new(), next_token, &mut Instruments::new())
}

/// One decode step in the store's mode. The generated token is text.
pub fn decode_lazy_with(
    weights: &ModelWeights,
    store: &mut SharedCacheStore,
    qcache: &mut QCache,
    next_token: u32,
    inst: &mut Instruments<'_>,
) -> Result<Vec<f32>> {
    let cfg = &weights.config;
    if store.layers.len() != cfg.n_layers {
        return Err(Error::CacheState(format!("store has {} layers, model has {}", store.layers.len(), cfg.n_layers)));
    }
    if store.layers[0].stored_len() == 0 {
        return Err(Error::CacheState("decode needs a populated store; run prefill first".into()));
    }
    TokenSequence::text(vec![next_token]).check_vocab(cfg.vocab_size)?;
    let (nh, scale, theta) = (cfg.n_heads, cfg.attention_scale(), cfg.rope_theta);
    let p = store.next_position;
    let rope = [p as i64];
    let mode = store.mode;

    let mut x = embed(weights, &[next_token]);
    for (l, lw) in weights.layers.iter().enumerate() {
        let h = attn_input(weights, l, &x);
        let role = store.layers[l].role;
        let shares_query = matches!(role, LayerRole::Lazy { .. }) && mode == LazyMode::Gla;
        let q = if shares_query {
            let LayerRole::Lazy { block, .. } = role else { unreachable!() };
            if qcache.block() != Some(block) {
                return Err(stale_qcache(l, block));
            }
            qcache.queries().to_vec()
        } else {
            let q = rotated_heads(&project(&mut inst.flops, Op::QProj, &h, &lw.wq), nh, &rope, theta);
            let k = rotated_heads(&project(&mut inst.flops, Op::KProj, &h, &lw.wk), nh, &rope, theta);
            let ls = &mut store.layers[l];
            for (kh, new) in ls.keys.iter_mut().zip(&k) {
                kh.push_row(new.row(0));
            }
            ls.key_positions.push(p);
            if let (LayerRole::Anchor { block }, LazyMode::Gla) = (role, mode) {
                qcache.publish(block, q.clone());
            }
            q
        };
        let v = project(&mut inst.flops, Op::VProj, &h, &lw.wv).split_cols(nh);

        let anchor = match role {
            LayerRole::Lazy { anchor, .. } => anchor,
            _ => l,
        };
        let anchor_rows = store.layers[anchor].keys[0].rows();
        let ls = &mut store.layers[l];
        for (vh, new) in ls.values.iter_mut().zip(&v) {
            vh.push_row(new.row(0));
        }
        ls.positions.push(p);
        ls.modality.push(Modality::Text);
        let own_rows = ls.keys[0].rows();
        if let KeyLayout::Gathered(sources) = &mut ls.layout {
            sources.push(if shares_query { KeySource::Anchor(anchor_rows - 1) } else { KeySource::Own(own_rows - 1) });
        }

        let ls = &store.layers[l];
        let anchor_keys = &store.layers[anchor].keys;
        let outs = attend_heads(
            inst,
            l,
            &q,
            |hd| match &ls.layout {
                KeyLayout::Own => Keys::Dense(&ls.keys[hd]),
                KeyLayout::AnchorDense => Keys::Dense(&anchor_keys[hd]),
                KeyLayout::Gathered(sources) => Keys::Gather { own: &ls.keys[hd], anchor: &anchor_keys[hd], sources },
            },
            &ls.values,
            scale,
        );
        x = finish_layer(&mut inst.flops, lw, cfg.norm_eps, &x, &outs);
        inst.layer_output(l, &x);
    }
    store.next_position += 1;
    Ok(output_logits(&mut inst.flops, weights, &x).into_data())
}
