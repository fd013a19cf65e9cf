//! Reference implementations for tests and `verify`. Nothing here touches
//! the production kernels or caches: every forward pass recomputes all
//! projections of the whole sequence from scratch, and lazy layers get their
//! anchor's queries and keys by re-projecting the anchor's retained input.
//! Arithmetic order matches the production path so results can be compared
//! bitwise.

use crate::error::{Error, Result};
use crate::model::{LayerWeights, Modality, ModelWeights, TokenSequence};
use crate::planner::{LayerRole, LazyMode, LazyPlan};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleConfig {
    /// Demand identical bits instead of `tolerance_abs`.
    pub tolerance_bitwise: bool,
    pub tolerance_abs: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { tolerance_bitwise: true, tolerance_abs: 1e-5 }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance_abs > 0.0) {
            return Err(Error::InvalidInput(format!("tolerance_abs must be positive, got {}", self.tolerance_abs)));
        }
        Ok(())
    }

    /// First index where `got` and `want` disagree under this config.
    pub fn first_mismatch(&self, got: &[f32], want: &[f32]) -> Option<usize> {
        if got.len() != want.len() {
            return Some(got.len().min(want.len()));
        }
        got.iter().zip(want).position(|(a, b)| {
            if self.tolerance_bitwise {
                a.to_bits() != b.to_bits()
            } else {
                ((a - b).abs() as f64) > self.tolerance_abs || a.is_nan() != b.is_nan()
            }
        })
    }
}

/// Visual-token pruning as the oracle models it: after `layer`, decode
/// positions (those at or past `prompt_len`) no longer see the dropped
/// visual positions. Which positions drop is derived independently from the
/// oracle's own attention at `layer`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OraclePrune {
    pub layer: usize,
    pub keep_ratio: f64,
    pub prompt_len: usize,
}

/// Per-layer hidden states and logits of one oracle pass.
#[derive(Debug, Clone)]
pub struct OracleTrace {
    pub logits: Matrix,
    pub layer_outputs: Vec<Matrix>,
    /// Per layer, per head, full `s x s` attention probabilities.
    pub attention: Vec<Vec<Matrix>>,
    pub dropped: Vec<usize>,
}

// Flat row-major kernels.

fn o_matmul(a: &[f32], m: usize, k: usize, b: &[f32], n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        for p in 0..k {
            let a_ip = a[i * k + p];
            for j in 0..n {
                c[i * n + j] += a_ip * b[p * n + j];
            }
        }
    }
    c
}

fn o_rmsnorm(x: &[f32], rows: usize, cols: usize, g: &[f32], eps: f32) -> Vec<f32> {
    let mut y = vec![0.0f32; rows * cols];
    for r in 0..rows {
        let mut ss = 0.0f32;
        for c in 0..cols {
            ss += x[r * cols + c] * x[r * cols + c];
        }
        let inv = 1.0 / (ss / cols as f32 + eps).sqrt();
        for c in 0..cols {
            y[r * cols + c] = x[r * cols + c] * inv * g[c];
        }
    }
    y
}

/// Rotates every head of a `rows x (heads*dh)` projection in place; row `r`
/// sits at sequence position `r`.
fn o_rope(x: &mut [f32], rows: usize, heads: usize, dh: usize, theta: f32) {
    let width = heads * dh;
    for r in 0..rows {
        for h in 0..heads {
            for i in 0..dh / 2 {
                let freq = (theta as f64).powf(-2.0 * i as f64 / dh as f64);
                let ang = r as f64 * freq;
                let c = ang.cos() as f32;
                let s = ang.sin() as f32;
                let at = r * width + h * dh + 2 * i;
                let x0 = x[at];
                let x1 = x[at + 1];
                x[at] = x0 * c - x1 * s;
                x[at + 1] = x0 * s + x1 * c;
            }
        }
    }
}

fn o_silu(v: f32) -> f32 {
    v / (1.0 + (-v).exp())
}

struct Projected {
    q: Vec<f32>,
    k: Vec<f32>,
}

fn project_qk(weights: &ModelWeights, layer: usize, x: &[f32], s: usize) -> Projected {
    let c = &weights.config;
    let lw = &weights.layers[layer];
    let h = o_rmsnorm(x, s, c.d_model, &lw.attn_norm, c.norm_eps);
    let mut q = o_matmul(&h, s, c.d_model, lw.wq.data(), c.d_model);
    let mut k = o_matmul(&h, s, c.d_model, lw.wk.data(), c.d_model);
    o_rope(&mut q, s, c.n_heads, c.d_head, c.rope_theta);
    o_rope(&mut k, s, c.n_heads, c.d_head, c.rope_theta);
    Projected { q, k }
}

fn retained(n_visual: usize, keep_ratio: f64) -> usize {
    let want = (keep_ratio * n_visual as f64 - 1e-9).ceil();
    if want < 0.0 {
        0
    } else {
        (want as usize).min(n_visual)
    }
}

/// Full oracle pass with every intermediate exposed.
pub fn oracle_trace(
    weights: &ModelWeights,
    tokens: &TokenSequence,
    plan: Option<&LazyPlan>,
    prune: Option<OraclePrune>,
) -> Result<OracleTrace> {
    let c = &weights.config;
    let (n, d, heads, dh) = (c.n_layers, c.d_model, c.n_heads, c.d_head);
    let s = tokens.len();
    if s == 0 {
        return Err(Error::InvalidInput("token sequence is empty".into()));
    }
    if let Some(&bad) = tokens.token_ids().iter().find(|&&t| t as usize >= c.vocab_size) {
        return Err(Error::InvalidInput(format!("token {bad} outside the vocabulary")));
    }
    let roles: Vec<LayerRole> = match plan {
        Some(p) => {
            p.check_for_model(n)?;
            p.roles()
        }
        None => vec![LayerRole::Standard; n],
    };
    let mode = plan.map(|p| p.mode);
    if let Some(pr) = prune {
        if pr.layer >= n || !(pr.keep_ratio > 0.0 && pr.keep_ratio <= 1.0) || pr.prompt_len > s || pr.prompt_len == 0 {
            return Err(Error::InvalidInput("bad oracle prune request".into()));
        }
    }
    let scale = 1.0 / (dh as f32).sqrt();

    let mut x = vec![0.0f32; s * d];
    for (r, &t) in tokens.token_ids().iter().enumerate() {
        x[r * d..(r + 1) * d].copy_from_slice(weights.embed.row(t as usize));
    }

    let mut inputs: Vec<Vec<f32>> = Vec::with_capacity(n);
    let mut layer_outputs = Vec::with_capacity(n);
    let mut attention = Vec::with_capacity(n);
    let mut dropped: Vec<usize> = Vec::new();

    for l in 0..n {
        inputs.push(x.clone());
        let lw: &LayerWeights = &weights.layers[l];
        let own = project_qk(weights, l, &x, s);
        let (q, k) = match roles[l] {
            LayerRole::Lazy { anchor, .. } => {
                let shared = project_qk(weights, anchor, &inputs[anchor], s);
                match mode {
                    Some(LazyMode::Gla) => (shared.q, shared.k),
                    _ => {
                        // visual rows from the anchor, text rows from this layer
                        let mut q = own.q.clone();
                        let mut k = own.k.clone();
                        for (r, m) in tokens.modality().iter().enumerate() {
                            if *m == Modality::Visual {
                                q[r * d..(r + 1) * d].copy_from_slice(&shared.q[r * d..(r + 1) * d]);
                                k[r * d..(r + 1) * d].copy_from_slice(&shared.k[r * d..(r + 1) * d]);
                            }
                        }
                        (q, k)
                    }
                }
            }
            _ => (own.q, own.k),
        };
        let hn = o_rmsnorm(&x, s, d, &lw.attn_norm, c.norm_eps);
        let v = o_matmul(&hn, s, d, lw.wv.data(), d);

        let pruned_here = prune.filter(|p| l > p.layer);
        let mut attn_out = vec![0.0f32; s * d];
        let mut probs_all = Vec::with_capacity(heads);
        for h in 0..heads {
            let mut probs = Matrix::zeros(s, s);
            for i in 0..s {
                let keys: Vec<usize> = (0..=i)
                    .filter(|j| match pruned_here {
                        Some(p) if i >= p.prompt_len => dropped.binary_search(j).is_err(),
                        _ => true,
                    })
                    .collect();
                let mut logits = vec![0.0f32; keys.len()];
                for (t, &j) in keys.iter().enumerate() {
                    let mut acc = 0.0f32;
                    for e in 0..dh {
                        acc += q[i * d + h * dh + e] * k[j * d + h * dh + e];
                    }
                    logits[t] = acc * scale;
                }
                let mx = logits.iter().copied().fold(f32::NEG_INFINITY, |a, b| if b > a { b } else { a });
                let mut total = 0.0f32;
                for v in logits.iter_mut() {
                    *v = (*v - mx).exp();
                    total += *v;
                }
                let inv = 1.0 / total;
                for v in logits.iter_mut() {
                    *v *= inv;
                }
                for (t, &j) in keys.iter().enumerate() {
                    probs.set(i, j, logits[t]);
                    for e in 0..dh {
                        attn_out[i * d + h * dh + e] += logits[t] * v[j * d + h * dh + e];
                    }
                }
            }
            probs_all.push(probs);
        }

        if let Some(p) = prune.filter(|p| p.layer == l) {
            let last = p.prompt_len - 1;
            let mut score = vec![0.0f64; p.prompt_len];
            for pr in &probs_all {
                for (j, sc) in score.iter_mut().enumerate() {
                    *sc += pr.get(last, j) as f64;
                }
            }
            let total: f64 = score.iter().map(|v| v / heads as f64).sum();
            let score: Vec<f64> = score.iter().map(|v| v / heads as f64 / total).collect();
            let mut visual: Vec<usize> =
                (0..p.prompt_len).filter(|&j| tokens.modality()[j] == Modality::Visual).collect();
            // selection sort on (score desc, position asc)
            for a in 0..visual.len() {
                let mut best = a;
                for b in a + 1..visual.len() {
                    let (pb, pbest) = (visual[b], visual[best]);
                    if score[pb] > score[pbest] || (score[pb] == score[pbest] && pb < pbest) {
                        best = b;
                    }
                }
                visual.swap(a, best);
            }
            let keep = retained(visual.len(), p.keep_ratio);
            dropped = visual[keep..].to_vec();
            dropped.sort_unstable();
        }

        let o = o_matmul(&attn_out, s, d, lw.wo.data(), d);
        let mut x1 = vec![0.0f32; s * d];
        for t in 0..s * d {
            x1[t] = x[t] + o[t];
        }
        let h2 = o_rmsnorm(&x1, s, d, &lw.mlp_norm, c.norm_eps);
        let gate = o_matmul(&h2, s, d, lw.w_gate.data(), c.d_ff);
        let up = o_matmul(&h2, s, d, lw.w_up.data(), c.d_ff);
        let mut act = vec![0.0f32; s * c.d_ff];
        for t in 0..s * c.d_ff {
            act[t] = o_silu(gate[t]) * up[t];
        }
        let down = o_matmul(&act, s, c.d_ff, lw.w_down.data(), d);
        for t in 0..s * d {
            x[t] = x1[t] + down[t];
        }
        layer_outputs.push(Matrix::new(s, d, x.clone())?);
        attention.push(probs_all);
    }

    let hf = o_rmsnorm(&x, s, d, &weights.final_norm, c.norm_eps);
    let logits = o_matmul(&hf, s, d, weights.lm_head.data(), c.vocab_size);
    Ok(OracleTrace { logits: Matrix::new(s, c.vocab_size, logits)?, layer_outputs, attention, dropped })
}

/// Logits of every position, recomputed without caches.
pub fn oracle_prefill(
    weights: &ModelWeights,
    tokens: &TokenSequence,
    plan: Option<&LazyPlan>,
    prune: Option<OraclePrune>,
) -> Result<Matrix> {
    Ok(oracle_trace(weights, tokens, plan, prune)?.logits)
}

fn o_argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Greedy ids from repeated full passes over the growing sequence.
/// `prune` is `(layer, keep_ratio)`; the prompt length is fixed at entry.
pub fn oracle_full_generate(
    weights: &ModelWeights,
    tokens: &TokenSequence,
    plan: Option<&LazyPlan>,
    prune: Option<(usize, f64)>,
    steps: usize,
) -> Result<Vec<u32>> {
    if steps == 0 {
        return Err(Error::InvalidInput("steps must be at least 1".into()));
    }
    let prune = prune.map(|(layer, keep_ratio)| OraclePrune { layer, keep_ratio, prompt_len: tokens.len() });
    let mut seq = tokens.clone();
    let mut ids = Vec::with_capacity(steps);
    for _ in 0..steps {
        let logits = oracle_prefill(weights, &seq, plan, prune)?;
        let id = o_argmax(logits.row(logits.rows() - 1)) as u32;
        ids.push(id);
        seq.push_text(id);
    }
    Ok(ids)
}

/// Jensen-Shannon divergence through entropies: `H(m) - (H(p) + H(q)) / 2`.
pub fn naive_js(p: &[f64], q: &[f64]) -> f64 {
    let entropy = |d: &[f64]| -> f64 { -d.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>() };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * a + 0.5 * b).collect();
    entropy(&m) - 0.5 * (entropy(p) + entropy(q))
}
