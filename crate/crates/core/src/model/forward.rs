//! Layer building blocks shared by the standard and lazy runtimes, plus the
//! per-request instrumentation (FLOP meter and attention observer).

use serde::Serialize;

use super::{LayerWeights, ModelWeights};
use crate::tensor::{apply_rope_in_place, dot, matmul, rms_norm, silu, softmax_prefix, CausalMask, Matrix};

/// Metered operation classes. A multiply-accumulate counts as 2 FLOPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    QProj,
    KProj,
    VProj,
    OProj,
    AttnScores,
    AttnValues,
    Mlp,
    LmHead,
}

impl Op {
    pub const ALL: [Op; 8] =
        [Op::QProj, Op::KProj, Op::VProj, Op::OProj, Op::AttnScores, Op::AttnValues, Op::Mlp, Op::LmHead];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FlopMeter {
    counts: [u64; 8],
}

impl FlopMeter {
    pub fn add(&mut self, op: Op, flops: u64) {
        self.counts[op.index()] += flops;
    }

    pub fn get(&self, op: Op) -> u64 {
        self.counts[op.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn absorb(&mut self, other: &FlopMeter) {
        for (a, b) in self.counts.iter_mut().zip(other.counts) {
            *a += b;
        }
    }
}

/// Receives intermediate results of a forward pass.
pub trait ForwardObserver {
    /// Whether per-head attention probabilities should be materialized.
    fn wants_attention(&self) -> bool {
        false
    }

    /// Per-head probabilities for one layer, one `rows x keys` matrix per head.
    fn attention(&mut self, _layer: usize, _heads: &[Matrix]) {}

    /// Hidden state after the layer's residual MLP.
    fn layer_output(&mut self, _layer: usize, _hidden: &Matrix) {}
}

/// Request-local FLOP counter and optional observer.
#[derive(Default)]
pub struct Instruments<'a> {
    pub flops: FlopMeter,
    observer: Option<&'a mut dyn ForwardObserver>,
}

impl<'a> Instruments<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_observer(observer: &'a mut dyn ForwardObserver) -> Self {
        Self { flops: FlopMeter::default(), observer: Some(observer) }
    }

    pub(crate) fn from_option(observer: Option<&'a mut dyn ForwardObserver>) -> Self {
        Self { flops: FlopMeter::default(), observer }
    }

    pub(crate) fn wants_attention(&self) -> bool {
        self.observer.as_ref().is_some_and(|o| o.wants_attention())
    }

    pub(crate) fn attention(&mut self, layer: usize, heads: &[Matrix]) {
        if let Some(o) = self.observer.as_mut() {
            o.attention(layer, heads);
        }
    }

    pub(crate) fn layer_output(&mut self, layer: usize, hidden: &Matrix) {
        if let Some(o) = self.observer.as_mut() {
            o.layer_output(layer, hidden);
        }
    }
}

/// Where row `j` of a layer's key sequence lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeySource {
    /// Row of the layer's own key cache.
    Own(usize),
    /// Row of the block anchor's key cache.
    Anchor(usize),
}

/// Key rows for one head.
#[derive(Clone, Copy)]
pub(crate) enum Keys<'a> {
    Dense(&'a Matrix),
    Gather { own: &'a Matrix, anchor: &'a Matrix, sources: &'a [KeySource] },
}

impl<'a> Keys<'a> {
    fn len(&self) -> usize {
        match self {
            Keys::Dense(m) => m.rows(),
            Keys::Gather { sources, .. } => sources.len(),
        }
    }

    #[inline]
    fn row(&self, j: usize) -> &'a [f32] {
        match *self {
            Keys::Dense(m) => m.row(j),
            Keys::Gather { own, anchor, sources } => match sources[j] {
                KeySource::Own(r) => own.row(r),
                KeySource::Anchor(r) => anchor.row(r),
            },
        }
    }
}

pub(crate) fn embed(weights: &ModelWeights, ids: &[u32]) -> Matrix {
    let mut x = Matrix::with_cols(weights.config.d_model);
    for &id in ids {
        x.push_row(weights.embed.row(id as usize));
    }
    x
}

pub(crate) fn project(flops: &mut FlopMeter, op: Op, x: &Matrix, w: &Matrix) -> Matrix {
    flops.add(op, 2 * (x.rows() * x.cols() * w.cols()) as u64);
    matmul(x, w).expect("projection shapes follow the config")
}

pub(crate) fn attn_input(weights: &ModelWeights, layer: usize, x: &Matrix) -> Matrix {
    rms_norm(x, &weights.layers[layer].attn_norm, weights.config.norm_eps).expect("norm width")
}

/// Splits a projection into heads and rotates each by `positions`.
pub(crate) fn rotated_heads(projected: &Matrix, n_heads: usize, positions: &[i64], theta: f32) -> Vec<Matrix> {
    let mut heads = projected.split_cols(n_heads);
    for h in &mut heads {
        apply_rope_in_place(h, positions, theta).expect("positions match rows");
    }
    heads
}

/// Causal attention for one head. Query row `i` of `r` sees the first
/// `n - r + i + 1` keys, so a prefill is lower-triangular and a single decode
/// row sees the whole cache.
pub(crate) fn attend(
    q: &Matrix,
    keys: Keys<'_>,
    values: &Matrix,
    scale: f32,
    mut probs: Option<&mut Matrix>,
    flops: &mut FlopMeter,
) -> Matrix {
    let (r, n, dh) = (q.rows(), keys.len(), q.cols());
    debug_assert_eq!(values.rows(), n);
    debug_assert!(n >= r);
    let mut out = Matrix::zeros(r, dh);
    let mut logits = vec![0.0f32; n];
    let mut p = vec![0.0f32; n];
    for i in 0..r {
        let vis = CausalMask.visible(i, r, n);
        let qi = q.row(i);
        for (j, l) in logits[..vis].iter_mut().enumerate() {
            *l = dot(qi, keys.row(j));
        }
        softmax_prefix(&logits[..vis], vis, scale, &mut p[..vis]);
        let o = out.row_mut(i);
        for (j, &pj) in p[..vis].iter().enumerate() {
            for (od, vd) in o.iter_mut().zip(values.row(j)) {
                *od += pj * vd;
            }
        }
        if let Some(pm) = probs.as_deref_mut() {
            pm.row_mut(i)[..vis].copy_from_slice(&p[..vis]);
        }
        let macs = (vis * dh) as u64;
        flops.add(Op::AttnScores, 2 * macs);
        flops.add(Op::AttnValues, 2 * macs);
    }
    out
}

/// Output projection, residual, gated MLP, residual.
pub(crate) fn finish_layer(
    flops: &mut FlopMeter,
    lw: &LayerWeights,
    eps: f32,
    x: &Matrix,
    head_outputs: &[Matrix],
) -> Matrix {
    let attn = project(flops, Op::OProj, &Matrix::concat_cols(head_outputs), &lw.wo);
    let x1 = x.add(&attn).expect("residual shape");
    let h = rms_norm(&x1, &lw.mlp_norm, eps).expect("norm width");
    let mut gate = project(flops, Op::Mlp, &h, &lw.w_gate);
    let up = project(flops, Op::Mlp, &h, &lw.w_up);
    for (g, u) in gate.data_mut().iter_mut().zip(up.data()) {
        *g = silu(*g) * u;
    }
    let down = project(flops, Op::Mlp, &gate, &lw.w_down);
    x1.add(&down).expect("residual shape")
}

pub(crate) fn output_logits(flops: &mut FlopMeter, weights: &ModelWeights, x: &Matrix) -> Matrix {
    let h = rms_norm(x, &weights.final_norm, weights.config.norm_eps).expect("norm width");
    project(flops, Op::LmHead, &h, &weights.lm_head)
}

/// Runs every head of one layer's attention, reporting probabilities to the
/// observer when it asks for them.
pub(crate) fn attend_heads<'k>(
    inst: &mut Instruments<'_>,
    layer: usize,
    q_heads: &[Matrix],
    keys: impl Fn(usize) -> Keys<'k>,
    v_heads: &[Matrix],
    scale: f32,
) -> Vec<Matrix> {
    let capture = inst.wants_attention();
    let mut probs: Vec<Matrix> = Vec::new();
    let mut outs = Vec::with_capacity(q_heads.len());
    for (h, q) in q_heads.iter().enumerate() {
        let k = keys(h);
        let mut pm = capture.then(|| Matrix::zeros(q.rows(), k.len()));
        outs.push(attend(q, k, &v_heads[h], scale, pm.as_mut(), &mut inst.flops));
        if let Some(pm) = pm {
            probs.push(pm);
        }
    }
    if capture {
        inst.attention(layer, &probs);
    }
    outs
}
