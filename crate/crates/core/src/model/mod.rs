//! The toy multimodal decoder: configuration, weights, token sequences,
//! checkpoint I/O and the standard (non-lazy) runtime.
//!
//! Layers are pre-norm LLaMA-style blocks: RMSNorm, multi-head attention with
//! rotary positions, residual, RMSNorm, SiLU-gated MLP, residual.

mod checkpoint;
pub mod forward;
mod standard;
mod tokens;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Matrix;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, BLOB_FILE, MANIFEST_FILE};
pub use forward::{FlopMeter, ForwardObserver, Instruments, Op};
pub use standard::{
    decode_standard, decode_standard_with, prefill_standard, prefill_standard_with, KvCache, LayerKVCache,
};
pub use tokens::{read_token_sequences, Modality, TokenSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub rope_theta: f32,
    pub norm_eps: f32,
}

impl ModelConfig {
    pub const DEFAULT_ROPE_THETA: f32 = 10000.0;
    pub const DEFAULT_NORM_EPS: f32 = 1e-5;

    /// Builds a validated config, deriving `d_head = d_model / n_heads`.
    pub fn new(n_layers: usize, n_heads: usize, d_model: usize, d_ff: usize, vocab_size: usize) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::InvalidConfig(format!("d_model {d_model} is not divisible by n_heads {n_heads}")));
        }
        let config = Self {
            n_layers,
            n_heads,
            d_model,
            d_head: d_model / n_heads,
            d_ff,
            vocab_size,
            rope_theta: Self::DEFAULT_ROPE_THETA,
            norm_eps: Self::DEFAULT_NORM_EPS,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_layers == 0 {
            return fail("n_layers must be at least 1".into());
        }
        if self.n_heads == 0 || self.d_head == 0 {
            return fail("n_heads and d_head must be positive".into());
        }
        if self.d_model != self.n_heads * self.d_head {
            return fail(format!("d_model {} != n_heads {} x d_head {}", self.d_model, self.n_heads, self.d_head));
        }
        if self.d_head % 2 != 0 {
            return fail(format!("d_head {} must be even for rotary encoding", self.d_head));
        }
        if self.d_ff == 0 || self.vocab_size == 0 {
            return fail("d_ff and vocab_size must be positive".into());
        }
        if !(self.rope_theta > 0.0 && self.rope_theta.is_finite()) {
            return fail(format!("rope_theta must be positive, got {}", self.rope_theta));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return fail(format!("norm_eps must be positive, got {}", self.norm_eps));
        }
        Ok(())
    }

    /// `1/sqrt(D)` with `D` the head dimension.
    pub fn attention_scale(&self) -> f32 {
        1.0 / (self.d_head as f32).sqrt()
    }

    /// Total parameter count of the full model.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * d * d + 3 * d * self.d_ff + 2 * d;
        self.vocab_size * d + self.n_layers * per_layer + d + d * self.vocab_size
    }

    /// Names and shapes of every tensor, in checkpoint order.
    pub fn tensor_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        let mut out = vec![("embed".to_string(), vec![v, d])];
        for l in 0..self.n_layers {
            let p = |n: &str| format!("layers.{l}.{n}");
            out.push((p("attn_norm"), vec![d]));
            out.push((p("wq"), vec![d, d]));
            out.push((p("wk"), vec![d, d]));
            out.push((p("wv"), vec![d, d]));
            out.push((p("wo"), vec![d, d]));
            out.push((p("mlp_norm"), vec![d]));
            out.push((p("w_gate"), vec![d, f]));
            out.push((p("w_up"), vec![d, f]));
            out.push((p("w_down"), vec![f, d]));
        }
        out.push(("final_norm".to_string(), vec![d]));
        out.push(("lm_head".to_string(), vec![d, v]));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub mlp_norm: Vec<f32>,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    pub lm_head: Matrix,
}

impl ModelWeights {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Flat views of every tensor in checkpoint order.
    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![self.embed.data()];
        for l in &self.layers {
            out.push(&l.attn_norm);
            out.push(l.wq.data());
            out.push(l.wk.data());
            out.push(l.wv.data());
            out.push(l.wo.data());
            out.push(&l.mlp_norm);
            out.push(l.w_gate.data());
            out.push(l.w_up.data());
            out.push(l.w_down.data());
        }
        out.push(&self.final_norm);
        out.push(self.lm_head.data());
        out
    }

    /// Rebuilds weights from flat tensors in checkpoint order. Shapes come
    /// from the config; lengths are checked.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Vec<f32>>) -> Result<Self> {
        let layout = config.tensor_layout();
        if tensors.len() != layout.len() {
            return Err(Error::DimensionMismatch(format!("expected {} tensors, got {}", layout.len(), tensors.len())));
        }
        let mut it = layout.into_iter().zip(tensors);
        let mut next_matrix = || -> Result<Matrix> {
            let ((name, shape), data) = it.next().expect("layout length checked");
            let (rows, cols) = match shape.as_slice() {
                [r, c] => (*r, *c),
                [c] => (1, *c),
                _ => unreachable!("layout tensors are 1-D or 2-D"),
            };
            Matrix::new(rows, cols, data)
                .map_err(|_| Error::DimensionMismatch(format!("tensor {name} does not match shape {shape:?}")))
        };
        let embed = next_matrix()?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                attn_norm: next_matrix()?.into_data(),
                wq: next_matrix()?,
                wk: next_matrix()?,
                wv: next_matrix()?,
                wo: next_matrix()?,
                mlp_norm: next_matrix()?.into_data(),
                w_gate: next_matrix()?,
                w_up: next_matrix()?,
                w_down: next_matrix()?,
            });
        }
        let final_norm = next_matrix()?.into_data();
        let lm_head = next_matrix()?;
        Ok(Self { config, embed, layers, final_norm, lm_head })
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// Seeded synthetic checkpoint.
///
/// Every weight matrix is drawn from a SplitMix64 stream seeded with `seed`,
/// uniform in `[-1/sqrt(d_model), 1/sqrt(d_model))`, in checkpoint tensor
/// order. Norm gains are fixed to 1.
pub fn init_synthetic_model(config: ModelConfig, seed: u64) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = SplitMix64::new(seed);
    let bound = 1.0 / (config.d_model as f32).sqrt();
    let tensors = config
        .tensor_layout()
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            if name.ends_with("norm") {
                vec![1.0; n]
            } else {
                (0..n).map(|_| rng.symmetric_f32(bound)).collect()
            }
        })
        .collect();
    ModelWeights::from_tensors(config, tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig::new(2, 2, 8, 16, 32).unwrap()
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        assert!(matches!(ModelConfig::new(2, 3, 100, 16, 32), Err(Error::InvalidConfig(_))));
        let mut c = tiny();
        c.d_model = 10;
        assert!(c.validate().is_err());
        c = tiny();
        c.n_layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_synthetic_model(tiny(), 1).unwrap();
        let b = init_synthetic_model(tiny(), 1).unwrap();
        let c = init_synthetic_model(tiny(), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.is_finite());
        let bound = 1.0 / 8f32.sqrt();
        assert!(a.layers[0].wq.data().iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn layout_matches_param_count() {
        let c = tiny();
        let total: usize = c.tensor_layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        assert_eq!(total, c.param_count());
    }
}
