//! Dense linear algebra, probability primitives, seeded randomness, and the
//! RMSprop update rule shared by the rest of the pipeline.
//!
//! Everything here is deterministic: pure functions of their inputs, plus two
//! explicitly threaded pieces of state ([`RmspropState`], [`SeededStream`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smoothing floor applied to the second argument of [`kl_divergence`].
pub const KL_EPS: f64 = 1e-8;

/// Dense row-major matrix of f64 values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting shape mismatches and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "matrix {}x{} needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite matrix entry at flat index {i}"
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Matrix::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1))
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// y = Self · x.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::Dimension(format!(
                "matvec: matrix has {} cols, vector has {}",
                self.cols,
                x.len()
            )));
        }
        let mut y = vec![0.0; self.rows];
        for (i, yi) in y.iter_mut().enumerate() {
            let row = self.row(i);
            let mut acc = 0.0;
            for j in 0..self.cols {
                acc += row[j] * x[j];
            }
            *yi = acc;
        }
        Ok(y)
    }

    /// y = Selfᵀ · x.
    pub fn matvec_transpose(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::Dimension(format!(
                "matvec_transpose: matrix has {} rows, vector has {}",
                self.rows,
                x.len()
            )));
        }
        let mut y = vec![0.0; self.cols];
        for i in 0..self.rows {
            let row = self.row(i);
            for j in 0..self.cols {
                y[j] += row[j] * x[i];
            }
        }
        Ok(y)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "matmul: {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        Ok(out)
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

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for v in &mut self.data {
            *v *= c;
        }
    }
}

/// Compares two equal-length slices lexicographically with a total order on
/// f64 values.
pub fn cmp_slices(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        let ord = x.total_cmp(y);
        if ord != std::cmp::Ordering::Equal {
            return ord;
        }
    }
    std::cmp::Ordering::Equal
}

/// Sums values after sorting them, so the result does not depend on the
/// caller's ordering of the summands.
pub fn sum_sorted(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    values.iter().sum()
}

/// Mean of a set of equal-length rows, accumulated in lexicographic row
/// order. Bit-identical for any permutation of `rows`.
pub fn mean_of_rows(rows: &[&[f64]]) -> Vec<f64> {
    assert!(!rows.is_empty(), "mean_of_rows: empty row set");
    let dim = rows[0].len();
    let mut sorted: Vec<&[f64]> = rows.to_vec();
    sorted.sort_by(|a, b| cmp_slices(a, b));
    let mut acc = vec![0.0; dim];
    for row in sorted {
        for (a, v) in acc.iter_mut().zip(row.iter()) {
            *a += v;
        }
    }
    let inv = 1.0 / rows.len() as f64;
    for a in &mut acc {
        *a *= inv;
    }
    acc
}

/// Probability vector: non-negative entries summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("empty probability vector".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidInput(
                "probability entries must be finite and in [0, 1]".into(),
            ));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(ProbVector(values))
    }

    pub fn uniform(len: usize) -> Self {
        ProbVector(vec![1.0 / len as f64; len])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.0.iter().enumerate().skip(1) {
            if *v > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// Exp-normalizes logits with max subtraction for stability.
pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(Error::InvalidInput("softmax of empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("softmax of non-finite logits".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    ProbVector::new(exps.into_iter().map(|e| e / sum).collect())
}

/// D_KL(p ‖ q) = Σ p(z)·ln(p(z)/max(q(z), eps)). Terms with p(z)=0 contribute
/// zero; q is floored at `eps` so the result stays finite.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector, eps: f64) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension(format!(
            "kl_divergence: p has {} entries, q has {}",
            p.len(),
            q.len()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::InvalidInput("kl_divergence: eps must be > 0".into()));
    }
    let mut acc = 0.0;
    for (&pv, &qv) in p.values().iter().zip(q.values()) {
        if pv > 0.0 {
            acc += pv * (pv / qv.max(eps)).ln();
        }
    }
    Ok(acc)
}

/// Per-tensor RMSprop accumulator state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RmspropState {
    acc: Vec<f64>,
    decay: f64,
    epsilon: f64,
}

impl RmspropState {
    pub fn new(len: usize, decay: f64, epsilon: f64) -> Result<Self> {
        if !(0.0 < decay && decay < 1.0) {
            return Err(Error::Config(format!("rmsprop decay {decay} not in (0, 1)")));
        }
        if epsilon <= 0.0 {
            return Err(Error::Config(format!("rmsprop epsilon {epsilon} must be > 0")));
        }
        Ok(RmspropState { acc: vec![0.0; len], decay, epsilon })
    }

    /// Decay 0.9, epsilon 1e-8.
    pub fn with_defaults(len: usize) -> Self {
        RmspropState::new(len, 0.9, 1e-8).expect("default rmsprop settings are valid")
    }

    pub fn accumulator(&self) -> &[f64] {
        &self.acc
    }
}

/// One RMSprop update:
/// acc ← decay·acc + (1−decay)·g²,  p ← p − lr·g/(√acc + epsilon).
pub fn rmsprop_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut RmspropState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.acc.len() {
        return Err(Error::Dimension(format!(
            "rmsprop_step: params {}, grads {}, accumulator {}",
            params.len(),
            grads.len(),
            state.acc.len()
        )));
    }
    if lr <= 0.0 {
        return Err(Error::Config(format!("learning rate {lr} must be > 0")));
    }
    for i in 0..params.len() {
        let g = grads[i];
        state.acc[i] = state.decay * state.acc[i] + (1.0 - state.decay) * g * g;
        params[i] -= lr * g / (state.acc[i].sqrt() + state.epsilon);
    }
    Ok(())
}

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic counter-based random stream. The draw sequence depends only
/// on the seed, never on platform RNG state, so seed-0 runs replay exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeededStream {
    seed: u64,
    counter: u64,
}

impl SeededStream {
    pub fn new(seed: u64) -> Self {
        SeededStream { seed, counter: 0 }
    }

    /// Stream for an independent substream, e.g. per-epoch shuffling.
    pub fn derived(seed: u64, tag: u64) -> Self {
        SeededStream::new(mix(seed ^ mix(tag.wrapping_add(GAMMA))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.seed.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform draw in [0, 1).
    pub fn draw_uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via the Box-Muller transform of two uniforms.
    pub fn draw_gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.draw_uniform(); // (0, 1], keeps ln finite
        let u2 = self.draw_uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform integer in [0, n), rejection-sampled to avoid modulo bias.
    pub fn draw_choice(&mut self, n: usize) -> usize {
        assert!(n > 0, "draw_choice: n must be positive");
        let n = n as u64;
        let cap = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < cap {
                return (v % n) as usize;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.draw_choice(i + 1);
            xs.swap(i, j);
        }
    }
}
