//! Inter-layer attention similarity: last-row attention per layer, averaged
//! over heads, compared pairwise with the Jensen-Shannon divergence (nats).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::model::{prefill_standard, ForwardObserver, ModelWeights, TokenSequence};
use crate::tensor::Matrix;

const NORM_TOL: f64 = 1e-6;

fn check_pair(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::InvalidInput(format!("distributions have lengths {} and {}", p.len(), q.len())));
    }
    for (name, d) in [("p", p), ("q", q)] {
        if d.is_empty() {
            return Err(Error::InvalidInput(format!("{name} is empty")));
        }
        if d.iter().any(|&x| !x.is_finite() || x < 0.0) {
            return Err(Error::InvalidInput(format!("{name} has negative or non-finite entries")));
        }
        let s: f64 = d.iter().sum();
        if (s - 1.0).abs() > NORM_TOL {
            return Err(Error::InvalidInput(format!("{name} sums to {s}, not 1")));
        }
    }
    Ok(())
}

fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0f64;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return f64::INFINITY;
        }
        acc += pi * (pi / qi).ln();
    }
    acc
}

/// `sum p_i ln(p_i / q_i)` with `0 ln 0 = 0`. Infinite when `q` misses
/// support of `p`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    Ok(kl_unchecked(p, q))
}

/// Symmetric divergence against the midpoint distribution, in `[0, ln 2]`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    Ok(js_unchecked(p, q))
}

fn js_unchecked(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a + b) / 2.0).collect();
    (0.5 * (kl_unchecked(p, &m) + kl_unchecked(q, &m))).max(0.0)
}

/// Head-averaged attention of one prompt, per layer. With `full_matrix`
/// every query row is kept; otherwise only the last one.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSnapshot {
    /// `layers[l][r]` is the distribution of the `r`-th kept row at layer `l`.
    pub layers: Vec<Vec<Vec<f64>>>,
}

impl AttentionSnapshot {
    /// Last-row distribution `a^l`.
    pub fn last_row(&self, layer: usize) -> &[f64] {
        self.layers[layer].last().expect("snapshot rows")
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }
}

/// Observer that records head-averaged rows of every layer.
pub struct SnapshotCollector {
    full_matrix: bool,
    layers: Vec<Vec<Vec<f64>>>,
}

impl SnapshotCollector {
    pub fn new(full_matrix: bool) -> Self {
        Self { full_matrix, layers: Vec::new() }
    }

    pub fn finish(self) -> AttentionSnapshot {
        AttentionSnapshot { layers: self.layers }
    }
}

fn head_average(heads: &[Matrix], row: usize) -> Vec<f64> {
    let n = heads[0].cols();
    let mut avg = vec![0.0f64; n];
    for h in heads {
        for (a, &p) in avg.iter_mut().zip(h.row(row)) {
            *a += p as f64;
        }
    }
    let nh = heads.len() as f64;
    for a in &mut avg {
        *a /= nh;
    }
    // rows of the causal prefill have trailing zeros; keep the visible prefix
    let visible = row + 1 + n - heads[0].rows();
    avg.truncate(visible);
    let s: f64 = avg.iter().sum();
    for a in &mut avg {
        *a /= s;
    }
    avg
}

impl ForwardObserver for SnapshotCollector {
    fn wants_attention(&self) -> bool {
        true
    }

    fn attention(&mut self, layer: usize, heads: &[Matrix]) {
        debug_assert_eq!(layer, self.layers.len());
        let rows = heads[0].rows();
        let kept: Vec<Vec<f64>> = if self.full_matrix {
            (0..rows).map(|r| head_average(heads, r)).collect()
        } else {
            vec![head_average(heads, rows - 1)]
        };
        self.layers.push(kept);
    }
}

pub fn capture_attention(
    weights: &ModelWeights,
    tokens: &TokenSequence,
    full_matrix: bool,
) -> Result<AttentionSnapshot> {
    let mut collector = SnapshotCollector::new(full_matrix);
    prefill_standard(weights, tokens, Some(&mut collector))?;
    Ok(collector.finish())
}

/// Mean pairwise JS over the kept rows of two layers.
fn layer_divergence(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut acc = 0.0;
    for (p, q) in a.iter().zip(b) {
        acc += js_unchecked(p, q);
    }
    acc / a.len() as f64
}

fn sample_matrix(snap: &AttentionSnapshot) -> Vec<Vec<f64>> {
    let n = snap.n_layers();
    let mut s = vec![vec![0.0; n]; n];
    for m in 0..n {
        for k in m + 1..n {
            let v = layer_divergence(&snap.layers[m], &snap.layers[k]);
            s[m][k] = v;
            s[k][m] = v;
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityProfile {
    pub n_layers: usize,
    pub n_samples: usize,
    #[serde(rename = "S")]
    pub s: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct ProfileOptions {
    pub full_matrix: bool,
    pub threads: usize,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self { full_matrix: false, threads: 1 }
    }
}

/// Mean JS divergence between every pair of layers over the corpus. Samples
/// may be processed on several threads; they are always summed in corpus
/// order, so the result does not depend on `threads`.
pub fn profile_model(
    weights: &ModelWeights,
    corpus: &[TokenSequence],
    opts: ProfileOptions,
) -> Result<SimilarityProfile> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("profiling corpus is empty".into()));
    }
    if let Some(i) = corpus.iter().position(|s| s.len() < 2) {
        return Err(Error::InvalidInput(format!("sample {i} has fewer than 2 tokens")));
    }
    let threads = opts.threads.max(1).min(corpus.len());
    let per_sample: Vec<Result<Vec<Vec<f64>>>> = if threads == 1 {
        corpus.iter().map(|t| capture_attention(weights, t, opts.full_matrix).map(|s| sample_matrix(&s))).collect()
    } else {
        let chunk = corpus.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = corpus
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|t| capture_attention(weights, t, opts.full_matrix).map(|s| sample_matrix(&s)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("profiling worker panicked")).collect()
        })
    };

    let n = weights.config.n_layers;
    let mut sum = vec![vec![0.0f64; n]; n];
    for m in per_sample {
        let m = m?;
        for (row, mrow) in sum.iter_mut().zip(&m) {
            for (a, b) in row.iter_mut().zip(mrow) {
                *a += b;
            }
        }
    }
    let count = corpus.len() as f64;
    for row in &mut sum {
        for a in row.iter_mut() {
            *a /= count;
        }
    }
    Ok(SimilarityProfile { n_layers: n, n_samples: corpus.len(), s: sum })
}

impl SimilarityProfile {
    pub fn validate(&self) -> Result<()> {
        let ln2 = std::f64::consts::LN_2;
        if self.n_layers == 0 || self.s.len() != self.n_layers || self.s.iter().any(|r| r.len() != self.n_layers) {
            return Err(Error::InvalidInput(format!("profile matrix is not {0}x{0}", self.n_layers)));
        }
        for i in 0..self.n_layers {
            if self.s[i][i] != 0.0 {
                return Err(Error::InvalidInput(format!("diagonal entry {i} is not zero")));
            }
            for j in 0..self.n_layers {
                let v = self.s[i][j];
                if !(-1e-9..=ln2 + 1e-9).contains(&v) {
                    return Err(Error::InvalidInput(format!("S[{i}][{j}] = {v} outside [0, ln 2]")));
                }
                if (v - self.s[j][i]).abs() > 1e-12 {
                    return Err(Error::InvalidInput(format!("S is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(())
    }

    /// `S(l, l+1)` for every layer but the last.
    pub fn adjacent_profile(&self) -> Vec<f64> {
        (0..self.n_layers.saturating_sub(1)).map(|i| self.s[i][i + 1]).collect()
    }

    /// `ln 2 - S`, so that larger means more similar.
    pub fn similarity_view(&self) -> Vec<Vec<f64>> {
        let ln2 = std::f64::consts::LN_2;
        self.s.iter().map(|r| r.iter().map(|v| ln2 - v).collect()).collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("profile serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// CSV with header `layer,next_layer,js`, one row per adjacent pair.
    pub fn adjacent_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["layer", "next_layer", "js"])?;
        for (i, v) in self.adjacent_profile().iter().enumerate() {
            w.write_record([i.to_string(), (i + 1).to_string(), format!("{v:.12}")])?;
        }
        w.flush()?;
        let mut bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        bytes.flush()?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_synthetic_model, Modality, ModelConfig};
    use crate::rng::SplitMix64;
    use std::f64::consts::LN_2;

    fn random_dist(rng: &mut SplitMix64, n: usize) -> Vec<f64> {
        let mut v: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
        if n > 1 && rng.below(4) == 0 {
            v[rng.below(n as u64) as usize] = 0.0;
        }
        let s: f64 = v.iter().sum();
        v.iter().map(|x| x / s).collect()
    }

    #[test]
    fn kl_examples() {
        let p = [0.3, 0.7];
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - LN_2).abs() < 1e-12);
        let want = 0.5 * LN_2 + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl_divergence(&[0.5, 0.5], &[0.25, 0.75]).unwrap() - want).abs() < 1e-12);
        assert!(kl_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap().is_infinite());
    }

    #[test]
    fn js_examples() {
        let p = [0.2, 0.5, 0.3];
        assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
        assert!((js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - LN_2).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_distributions() {
        assert!(js_divergence(&[0.5, 0.5], &[1.0]).is_err());
        assert!(js_divergence(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(kl_divergence(&[1.5, -0.5], &[0.5, 0.5]).is_err());
        assert!(js_divergence(&[], &[]).is_err());
    }

    #[test]
    fn js_symmetric_and_bounded() {
        let mut rng = SplitMix64::new(9);
        for _ in 0..300 {
            let n = 1 + rng.below(12) as usize;
            let (p, q) = (random_dist(&mut rng, n), random_dist(&mut rng, n));
            let a = js_divergence(&p, &q).unwrap();
            let b = js_divergence(&q, &p).unwrap();
            assert!((a - b).abs() < 1e-15);
            assert!((0.0..=LN_2 + 1e-9).contains(&a));
        }
    }

    fn model(n_layers: usize) -> ModelWeights {
        init_synthetic_model(ModelConfig::new(n_layers, 2, 8, 16, 30).unwrap(), 3).unwrap()
    }

    fn corpus() -> Vec<TokenSequence> {
        vec![
            TokenSequence::text(vec![1, 2, 3, 4, 5]),
            TokenSequence::new(vec![7, 8, 9], vec![Modality::Visual, Modality::Visual, Modality::Text]).unwrap(),
            TokenSequence::text(vec![11, 0, 29, 4]),
        ]
    }

    #[test]
    fn snapshot_rows_are_distributions() {
        let snap = capture_attention(&model(3), &corpus()[0], true).unwrap();
        assert_eq!(snap.n_layers(), 3);
        for layer in &snap.layers {
            assert_eq!(layer.len(), 5);
            for (r, row) in layer.iter().enumerate() {
                assert_eq!(row.len(), r + 1);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&x| x >= 0.0));
            }
        }
        assert_eq!(snap.last_row(2).len(), 5);
    }

    #[test]
    fn profile_invariants_and_determinism() {
        let w = model(4);
        let p = profile_model(&w, &corpus(), ProfileOptions::default()).unwrap();
        p.validate().unwrap();
        assert_eq!(p.n_samples, 3);
        let threaded = profile_model(&w, &corpus(), ProfileOptions { full_matrix: false, threads: 3 }).unwrap();
        assert_eq!(p, threaded);
        let adj = p.adjacent_profile();
        assert_eq!(adj.len(), 3);
        for (i, v) in adj.iter().enumerate() {
            assert_eq!(*v, p.s[i + 1][i]);
        }
        let view = p.similarity_view();
        for i in 0..4 {
            assert_eq!(view[i][i], LN_2);
            for j in 0..4 {
                assert!((view[i][j] + p.s[i][j] - LN_2).abs() < 1e-15);
            }
        }
        let full = profile_model(&w, &corpus(), ProfileOptions { full_matrix: true, threads: 1 }).unwrap();
        full.validate().unwrap();
    }

    #[test]
    fn one_layer_profile() {
        let p = profile_model(&model(1), &corpus(), ProfileOptions::default()).unwrap();
        assert_eq!(p.s, vec![vec![0.0]]);
        assert!(p.adjacent_profile().is_empty());
        assert_eq!(p.adjacent_csv().unwrap(), "layer,next_layer,js\n");
    }

    #[test]
    fn rejects_empty_or_short_corpus() {
        let w = model(2);
        assert!(profile_model(&w, &[], ProfileOptions::default()).is_err());
        assert!(profile_model(&w, &[TokenSequence::text(vec![1])], ProfileOptions::default()).is_err());
    }

    #[test]
    fn json_round_trip() {
        let p = profile_model(&model(3), &corpus(), ProfileOptions::default()).unwrap();
        let text = p.to_json();
        assert!(text.contains("\"S\""));
        assert_eq!(SimilarityProfile::from_json(&text).unwrap(), p);
        assert!(SimilarityProfile::from_json(r#"{"n_layers":2,"n_samples":1,"S":[[0,1],[1,0]]}"#).is_err());
    }
}
