//! Standard runtime: full prefill over the prompt, then one-token decode
//! steps against a conventional per-layer KV cache.

use super::forward::{
    attend_heads, attn_input, embed, finish_layer, output_logits, project, rotated_heads, ForwardObserver, Instruments,
    Keys, Op,
};
use super::{ModelWeights, TokenSequence};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Post-rotation keys and values of one layer, one matrix per head.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKVCache {
    pub keys: Vec<Matrix>,
    pub values: Vec<Matrix>,
}

impl LayerKVCache {
    pub fn stored_len(&self) -> usize {
        self.values.first().map_or(0, Matrix::rows)
    }

    pub fn bytes(&self) -> usize {
        self.keys.iter().chain(&self.values).map(Matrix::bytes).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    layers: Vec<LayerKVCache>,
    next_position: usize,
}

impl KvCache {
    pub fn layers(&self) -> &[LayerKVCache] {
        &self.layers
    }

    pub fn bytes(&self) -> usize {
        self.layers.iter().map(LayerKVCache::bytes).sum()
    }

    /// Sequence position the next decoded token will occupy.
    pub fn next_position(&self) -> usize {
        self.next_position
    }

    pub fn is_empty(&self) -> bool {
        self.layers.first().is_none_or(|l| l.stored_len() == 0)
    }
}

pub fn prefill_standard(
    weights: &ModelWeights,
    tokens: &TokenSequence,
    observer: Option<&mut dyn ForwardObserver>,
) -> Result<(Matrix, KvCache)> {
    prefill_standard_with(weights, tokens, &mut Instruments::from_option(observer))
}

pub fn prefill_standard_with(
    weights: &ModelWeights,
    tokens: &TokenSequence,
    inst: &mut Instruments<'_>,
) -> Result<(Matrix, KvCache)> {
    let cfg = &weights.config;
    tokens.check_vocab(cfg.vocab_size)?;
    let positions: Vec<i64> = (0..tokens.len() as i64).collect();
    let mut x = embed(weights, tokens.token_ids());
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (l, lw) in weights.layers.iter().enumerate() {
        let h = attn_input(weights, l, &x);
        let q =
            rotated_heads(&project(&mut inst.flops, Op::QProj, &h, &lw.wq), cfg.n_heads, &positions, cfg.rope_theta);
        let k =
            rotated_heads(&project(&mut inst.flops, Op::KProj, &h, &lw.wk), cfg.n_heads, &positions, cfg.rope_theta);
        let v = project(&mut inst.flops, Op::VProj, &h, &lw.wv).split_cols(cfg.n_heads);
        let outs = attend_heads(inst, l, &q, |hd| Keys::Dense(&k[hd]), &v, cfg.attention_scale());
        x = finish_layer(&mut inst.flops, lw, cfg.norm_eps, &x, &outs);
        inst.layer_output(l, &x);
        layers.push(LayerKVCache { keys: k, values: v });
    }
    let logits = output_logits(&mut inst.flops, weights, &x);
    Ok((logits, KvCache { layers, next_position: tokens.len() }))
}

pub fn decode_standard(weights: &ModelWeights, cache: &mut KvCache, next_token: u32) -> Result<Vec<f32>> {
    decode_standard_with(weights, cache, next_token, &mut Instruments::new())
}

pub fn decode_standard_with(
    weights: &ModelWeights,
    cache: &mut KvCache,
    next_token: u32,
    inst: &mut Instruments<'_>,
) -> Result<Vec<f32>> {
    let cfg = &weights.config;
    if cache.is_empty() {
        return Err(Error::CacheState("decode needs a populated cache; run prefill first".into()));
    }
    if cache.layers.len() != cfg.n_layers {
        return Err(Error::CacheState(format!("cache has {} layers, model has {}", cache.layers.len(), cfg.n_layers)));
    }
    TokenSequence::text(vec![next_token]).check_vocab(cfg.vocab_size)?;
    let positions = [cache.next_position as i64];
    let mut x = embed(weights, &[next_token]);
    for (l, lw) in weights.layers.iter().enumerate() {
        let h = attn_input(weights, l, &x);
        let q =
            rotated_heads(&project(&mut inst.flops, Op::QProj, &h, &lw.wq), cfg.n_heads, &positions, cfg.rope_theta);
        let k =
            rotated_heads(&project(&mut inst.flops, Op::KProj, &h, &lw.wk), cfg.n_heads, &positions, cfg.rope_theta);
        let v = project(&mut inst.flops, Op::VProj, &h, &lw.wv).split_cols(cfg.n_heads);
        let layer = &mut cache.layers[l];
        for hd in 0..cfg.n_heads {
            layer.keys[hd].push_row(k[hd].row(0));
            layer.values[hd].push_row(v[hd].row(0));
        }
        let layer = &cache.layers[l];
        let outs = attend_heads(inst, l, &q, |hd| Keys::Dense(&layer.keys[hd]), &layer.values, cfg.attention_scale());
        x = finish_layer(&mut inst.flops, lw, cfg.norm_eps, &x, &outs);
        inst.layer_output(l, &x);
    }
    cache.next_position += 1;
    Ok(output_logits(&mut inst.flops, weights, &x).into_data())
}
