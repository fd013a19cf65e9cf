//! Dense f32 kernels the engine is built on.
//!
//! Every reduction runs in a fixed order: dot products and matrix products
//! accumulate from `0.0` over the inner index in ascending order, softmax
//! subtracts the row maximum of the scaled logits and sums the exponentials
//! left to right. Cache-vs-recompute checks rely on this to demand bitwise
//! equality, so nothing here may reassociate a sum.

use crate::error::{Error, Result};

/// Row-major matrix of 32-bit floats.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{} elements cannot form a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// An empty matrix with a fixed column count, ready for `push_row`.
    pub fn with_cols(cols: usize) -> Self {
        Self { rows: 0, cols, data: Vec::new() }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!("row {i} has {} columns, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn row_vector(values: Vec<f32>) -> Self {
        Self { rows: 1, cols: values.len(), data: values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn push_row(&mut self, row: &[f32]) {
        assert_eq!(row.len(), self.cols, "push_row width");
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    /// Size of the payload in bytes (4 per element).
    pub fn bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f32>()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Copies the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut out = Matrix::with_cols(self.cols);
        out.data.reserve(indices.len() * self.cols);
        for &i in indices {
            out.push_row(self.row(i));
        }
        out
    }

    /// Keeps only the rows for which `keep` returns true.
    pub fn retain_rows(&mut self, mut keep: impl FnMut(usize) -> bool) {
        let cols = self.cols;
        let mut write = 0;
        for read in 0..self.rows {
            if keep(read) {
                if write != read {
                    self.data.copy_within(read * cols..(read + 1) * cols, write * cols);
                }
                write += 1;
            }
        }
        self.rows = write;
        self.data.truncate(write * cols);
    }

    /// Columns `[start, start + width)` as a new matrix.
    pub fn column_block(&self, start: usize, width: usize) -> Matrix {
        assert!(start + width <= self.cols, "column block out of range");
        let mut out = Matrix::zeros(self.rows, width);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[start..start + width]);
        }
        out
    }

    /// Splits the columns into `parts` equal blocks (one per attention head).
    pub fn split_cols(&self, parts: usize) -> Vec<Matrix> {
        assert!(parts > 0 && self.cols % parts == 0, "uneven column split");
        let width = self.cols / parts;
        (0..parts).map(|p| self.column_block(p * width, width)).collect()
    }

    /// Inverse of [`Matrix::split_cols`].
    pub fn concat_cols(parts: &[Matrix]) -> Matrix {
        let rows = parts.first().map_or(0, Matrix::rows);
        let cols: usize = parts.iter().map(Matrix::cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let dst = out.row_mut(i);
            let mut offset = 0;
            for p in parts {
                assert_eq!(p.rows, rows, "concat_cols row mismatch");
                dst[offset..offset + p.cols].copy_from_slice(p.row(i));
                offset += p.cols;
            }
        }
        out
    }

    /// Elementwise `self + other`.
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "cannot add {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }
}

/// Lower-triangular attention mask aligned to the bottom-right corner: row `i`
/// of an `r x c` logit matrix sees columns `0..=i + (c - r)`. A square matrix
/// gets the usual causal mask; a single row (a decode step) sees everything.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CausalMask;

impl CausalMask {
    /// Number of visible leading columns for `row`.
    pub fn visible(&self, row: usize, rows: usize, cols: usize) -> usize {
        (row + 1 + cols).saturating_sub(rows).min(cols)
    }
}

/// Dot product accumulated left to right from zero.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!("matmul {}x{} by {}x{}", a.rows, a.cols, b.rows, b.cols)));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0f32; m * n];
    // i-k-j order: every out[i][j] still sums its k terms in ascending order.
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        let arow = &a.data[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (d, &bkj) in dst.iter_mut().zip(brow) {
                *d += aik * bkj;
            }
        }
    }
    Ok(Matrix { rows: m, cols: n, data: out })
}

/// Softmax over the first `visible` entries of `logits` after multiplying by
/// `scale`; the tail of `out` is set to exactly zero.
pub fn softmax_prefix(logits: &[f32], visible: usize, scale: f32, out: &mut [f32]) {
    debug_assert_eq!(logits.len(), out.len());
    debug_assert!(visible >= 1 && visible <= logits.len());
    let mut max = f32::NEG_INFINITY;
    for (o, &l) in out[..visible].iter_mut().zip(&logits[..visible]) {
        *o = l * scale;
        if *o > max {
            max = *o;
        }
    }
    let mut sum = 0.0f32;
    for o in &mut out[..visible] {
        *o = (*o - max).exp();
        sum += *o;
    }
    let inv = 1.0 / sum;
    for o in &mut out[..visible] {
        *o *= inv;
    }
    out[visible..].fill(0.0);
}

pub fn masked_softmax_rows(logits: &Matrix, mask: Option<CausalMask>, scale: f32) -> Result<Matrix> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidInput(format!("softmax scale must be positive, got {scale}")));
    }
    if mask.is_some() && logits.rows != 1 && logits.rows != logits.cols {
        return Err(Error::Shape(format!(
            "causal softmax needs a square or single-row matrix, got {}x{}",
            logits.rows, logits.cols
        )));
    }
    let mut out = Matrix::zeros(logits.rows, logits.cols);
    for i in 0..logits.rows {
        let visible = match mask {
            Some(m) => m.visible(i, logits.rows, logits.cols),
            None => logits.cols,
        };
        softmax_prefix(logits.row(i), visible, scale, out.row_mut(i));
    }
    Ok(out)
}

pub fn rms_norm(x: &Matrix, gain: &[f32], eps: f32) -> Result<Matrix> {
    if gain.len() != x.cols {
        return Err(Error::Shape(format!("rms_norm gain has {} entries for {} columns", gain.len(), x.cols)));
    }
    let mut out = Matrix::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        let row = x.row(i);
        let mut ss = 0.0f32;
        for v in row {
            ss += v * v;
        }
        let inv = 1.0 / (ss / x.cols as f32 + eps).sqrt();
        for ((o, v), g) in out.row_mut(i).iter_mut().zip(row).zip(gain) {
            *o = *v * inv * *g;
        }
    }
    Ok(out)
}

/// Rotary position encoding on adjacent column pairs `(2i, 2i+1)` with
/// frequency `theta_base^(-2i/cols)`. Row `r` is rotated by `positions[r]`.
pub fn apply_rope(qk: &Matrix, positions: &[i64], theta_base: f32) -> Result<Matrix> {
    let mut out = qk.clone();
    apply_rope_in_place(&mut out, positions, theta_base)?;
    Ok(out)
}

pub fn apply_rope_in_place(qk: &mut Matrix, positions: &[i64], theta_base: f32) -> Result<()> {
    if qk.cols % 2 != 0 {
        return Err(Error::Shape(format!("rope needs an even column count, got {}", qk.cols)));
    }
    if positions.len() != qk.rows {
        return Err(Error::Shape(format!("{} positions for {} rows", positions.len(), qk.rows)));
    }
    if !(theta_base > 0.0) {
        return Err(Error::InvalidInput(format!("rope base must be positive, got {theta_base}")));
    }
    let half = qk.cols / 2;
    let freqs: Vec<f64> = (0..half).map(|i| (theta_base as f64).powf(-2.0 * i as f64 / qk.cols as f64)).collect();
    for (r, &pos) in positions.iter().enumerate() {
        let row = qk.row_mut(r);
        for (i, f) in freqs.iter().enumerate() {
            let angle = pos as f64 * f;
            let (s, c) = (angle.sin() as f32, angle.cos() as f32);
            let (x0, x1) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = x0 * c - x1 * s;
            row[2 * i + 1] = x0 * s + x1 * c;
        }
    }
    Ok(())
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f32]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[5.0], &[6.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), m(&[&[17.0], &[39.0]]));

        let x = m(&[&[1.5, -2.0, 0.25], &[3.0, 4.0, 5.0], &[0.0, 7.0, -1.0]]);
        assert_eq!(matmul(&Matrix::identity(3), &x).unwrap(), x);

        assert_eq!(matmul(&m(&[&[2.0]]), &m(&[&[3.0]])).unwrap(), m(&[&[6.0]]));
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let p = masked_softmax_rows(&m(&[&[0.0, 0.0]]), None, 1.0).unwrap();
        assert_eq!(p.row(0), &[0.5, 0.5]);

        let p = masked_softmax_rows(&m(&[&[3.0, 9.0], &[1.0, 2.0]]), Some(CausalMask), 1.0).unwrap();
        assert_eq!(p.row(0), &[1.0, 0.0]);

        let p = masked_softmax_rows(&m(&[&[2f32.ln(), 0.0]]), None, 1.0).unwrap();
        assert!((p.get(0, 0) - 2.0 / 3.0).abs() < 1e-6);
        assert!((p.get(0, 1) - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_rejects_bad_scale() {
        let l = Matrix::zeros(1, 2);
        assert!(masked_softmax_rows(&l, None, 0.0).is_err());
        assert!(masked_softmax_rows(&l, None, -1.0).is_err());
    }

    #[test]
    fn causal_mask_alignment() {
        let mask = CausalMask;
        assert_eq!(mask.visible(0, 3, 3), 1);
        assert_eq!(mask.visible(2, 3, 3), 3);
        assert_eq!(mask.visible(0, 1, 5), 5);
    }

    #[test]
    fn rms_norm_examples() {
        let z = rms_norm(&m(&[&[0.0, 0.0]]), &[1.0, 1.0], 1e-6).unwrap();
        assert_eq!(z.row(0), &[0.0, 0.0]);

        let y = rms_norm(&m(&[&[3.0, 4.0]]), &[1.0, 1.0], 0.0).unwrap();
        let r = 12.5f32.sqrt();
        assert!((y.get(0, 0) - 3.0 / r).abs() < 1e-6);
        assert!((y.get(0, 1) - 4.0 / r).abs() < 1e-6);

        let g = rms_norm(&m(&[&[3.0, 4.0]]), &[0.0, 0.0], 1e-6).unwrap();
        assert_eq!(g.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let x = m(&[&[0.3, -1.2, 2.5, 0.7]]);
        assert_eq!(apply_rope(&x, &[0], 10000.0).unwrap(), x);
    }

    #[test]
    fn rope_rejects_odd_columns() {
        let x = Matrix::zeros(1, 3);
        assert!(apply_rope(&x, &[0], 10000.0).is_err());
    }

    #[test]
    fn matrix_helpers() {
        let x = m(&[&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0]]);
        let parts = x.split_cols(2);
        assert_eq!(parts[1], m(&[&[3.0, 4.0], &[7.0, 8.0]]));
        assert_eq!(Matrix::concat_cols(&parts), x);
        assert_eq!(x.transpose().transpose(), x);
        let mut y = x.clone();
        y.retain_rows(|r| r == 1);
        assert_eq!(y, m(&[&[5.0, 6.0, 7.0, 8.0]]));
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    }

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        prop::collection::vec(-4.0f32..4.0, rows * cols).prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_deterministic(a in matrix(3, 5), b in matrix(5, 4)) {
            let x = matmul(&a, &b).unwrap();
            let y = matmul(&a, &b).unwrap();
            prop_assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }

        #[test]
        fn softmax_rows_sum_to_one(l in matrix(4, 4), shift in -10.0f32..10.0) {
            let p = masked_softmax_rows(&l, Some(CausalMask), 0.5).unwrap();
            for i in 0..4 {
                let s: f32 = p.row(i).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                for j in i + 1..4 {
                    prop_assert_eq!(p.get(i, j), 0.0);
                }
            }
            let shifted = Matrix::new(4, 4, l.data().iter().map(|x| x + shift).collect()).unwrap();
            let q = masked_softmax_rows(&shifted, Some(CausalMask), 0.5).unwrap();
            for (a, b) in p.data().iter().zip(q.data()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn rope_preserves_norm_and_inverts(
            d in prop::collection::vec(-1.0f32..1.0, 24),
            pos in prop::collection::vec(-3000i64..3000, 4),
        ) {
            let x = Matrix::new(4, 6, d).unwrap();
            let y = apply_rope(&x, &pos, 10000.0).unwrap();
            let back: Vec<i64> = pos.iter().map(|p| -p).collect();
            let z = apply_rope(&y, &back, 10000.0).unwrap();
            for r in 0..4 {
                let nx = dot(x.row(r), x.row(r)).sqrt();
                let ny = dot(y.row(r), y.row(r)).sqrt();
                prop_assert!((nx - ny).abs() < 1e-6);
                for (a, b) in x.row(r).iter().zip(z.row(r)) {
                    prop_assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }
}
