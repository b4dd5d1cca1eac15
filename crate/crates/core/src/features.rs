//! Per-parameter optimizer features.
//!
//! Each trainable tensor carries momentum, second-moment and factored
//! (Adafactor-style) row/column accumulators. From these, every scalar parameter
//! gets a 27-entry feature row, in this fixed order:
//!
//! | columns | feature                                                        |
//! |---------|----------------------------------------------------------------|
//! | 0       | parameter value `w`                                            |
//! | 1..4    | momenta `m_1, m_2, m_3` (decays β1..β3)                        |
//! | 4       | second moment `v` (decay β4)                                   |
//! | 5..8    | `m_k / sqrt(v + ε)`                                            |
//! | 8       | `1 / sqrt(v + ε)`                                              |
//! | 9..12   | factored-normalized gradient at three timescales               |
//! | 12..15  | row accumulators `r_1..r_3` tiled across columns (β5..β7)      |
//! | 15..18  | column accumulators `c_1..c_3` tiled across rows (β5..β7)      |
//! | 18..21  | `1 / sqrt(r_k + ε)`                                            |
//! | 21..24  | `1 / sqrt(c_k + ε)`                                            |
//! | 24..27  | factored-normalized momenta                                    |
//!
//! Factored normalization uses the rank-1 second-moment estimate
//! `V[i, j] ≈ R[i] C[j] / mean(R)` built from row means `R` and column means `C`
//! of a nonnegative accumulator, giving
//!
//! ```text
//! row_factor[i] = sqrt(mean(R) + ε) / sqrt(R[i] + ε)
//! col_factor[j] = 1 / sqrt(C[j] + ε)
//! ```
//!
//! The normalized gradient `Δ = g · row_factor(v) · col_factor(v)` uses the
//! factors of `v`; `r_k` and `c_k` track row and column means of `Δ²`. Timescale
//! `k` then normalizes once more with the factors of `(r_k, c_k)`:
//! columns 9+k hold `Δ · rf(r_k) · cf(c_k)`, columns 24+k hold
//! `m_k · rf(v) · cf(v) · rf(r_k) · cf(c_k)`.
//!
//! Bias vectors are `(n, 1)` tensors, so their row factors are per-entry and
//! the column factor is a single scalar.
//!
//! With `normalize` set, every column is divided, per tensor, by its root mean
//! square (floored at ε).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimizee::{Grads, OptimizeeParams};
use crate::tensor::Tensor;

pub const NUM_FEATURES: usize = 27;
pub const NUM_BETAS: usize = 7;
pub const DEFAULT_BETAS: [f64; NUM_BETAS] = [0.9, 0.99, 0.999, 0.999, 0.9, 0.99, 0.999];
pub const DEFAULT_EPSILON: f64 = 1e-8;

pub const COL_PARAM: usize = 0;
pub const COL_MOMENTUM: usize = 1;
pub const COL_SECOND_MOMENT: usize = 4;
pub const COL_NORMALIZED_MOMENTUM: usize = 5;
pub const COL_RSQRT_SECOND_MOMENT: usize = 8;
pub const COL_FACTORED_GRAD: usize = 9;
pub const COL_ROW: usize = 12;
pub const COL_COL: usize = 15;
pub const COL_RSQRT_ROW: usize = 18;
pub const COL_RSQRT_COL: usize = 21;
pub const COL_FACTORED_MOMENTUM: usize = 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// β1..β3 momenta, β4 second moment, β5..β7 factored accumulators.
    pub betas: [f64; NUM_BETAS],
    pub epsilon: f64,
    pub normalize: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { betas: DEFAULT_BETAS, epsilon: DEFAULT_EPSILON, normalize: true }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(b) = self.betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Argument(format!("feature decay {b} outside (0, 1)")));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Argument(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Accumulators for one parameter tensor of shape `(rows, cols)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorFeatureState {
    pub rows: usize,
    pub cols: usize,
    pub momentum: [Vec<f64>; 3],
    pub second_moment: Vec<f64>,
    pub row_acc: [Vec<f64>; 3],
    pub col_acc: [Vec<f64>; 3],
}

impl TensorFeatureState {
    fn zeros(rows: usize, cols: usize) -> Self {
        let n = rows * cols;
        TensorFeatureState {
            rows,
            cols,
            momentum: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            second_moment: vec![0.0; n],
            row_acc: [vec![0.0; rows], vec![0.0; rows], vec![0.0; rows]],
            col_acc: [vec![0.0; cols], vec![0.0; cols], vec![0.0; cols]],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureState {
    pub tensors: Vec<TensorFeatureState>,
}

pub fn init_state(params: &OptimizeeParams) -> FeatureState {
    FeatureState {
        tensors: params.tensors.iter().map(|t| TensorFeatureState::zeros(t.value.rows(), t.value.cols())).collect(),
    }
}

fn row_means(x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate().take(rows) {
        *o = x[r * cols..(r + 1) * cols].iter().sum::<f64>() / cols as f64;
    }
}

fn col_means(x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(&x[r * cols..(r + 1) * cols]) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= rows as f64);
}

/// Row and column factors of the rank-1 estimate built from row means `row`
/// and column means `col`.
fn factors(row: &[f64], col: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mean_row = row.iter().sum::<f64>() / row.len() as f64;
    let num = (mean_row + eps).sqrt();
    let rf = row.iter().map(|r| num / (r + eps).sqrt()).collect();
    let cf = col.iter().map(|c| 1.0 / (c + eps).sqrt()).collect();
    (rf, cf)
}

fn second_moment_factors(s: &TensorFeatureState, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut rm = vec![0.0; s.rows];
    let mut cm = vec![0.0; s.cols];
    row_means(&s.second_moment, s.rows, s.cols, &mut rm);
    col_means(&s.second_moment, s.rows, s.cols, &mut cm);
    factors(&rm, &cm, eps)
}

impl FeatureState {
    /// Folds the gradient `grads` into every accumulator.
    pub fn update(&mut self, grads: &Grads, cfg: &FeatureConfig) -> Result<()> {
        if grads.tensors.len() != self.tensors.len() {
            return Err(Error::Dimension(format!(
                "{} gradient tensors for {} feature states",
                grads.tensors.len(),
                self.tensors.len()
            )));
        }
        let b = &cfg.betas;
        for (s, g) in self.tensors.iter_mut().zip(&grads.tensors) {
            if g.shape() != (s.rows, s.cols) {
                return Err(Error::Dimension(format!("gradient {:?} vs state {:?}", g.shape(), (s.rows, s.cols))));
            }
            let g = g.data();
            for k in 0..3 {
                for (m, &gi) in s.momentum[k].iter_mut().zip(g) {
                    *m = b[k] * *m + (1.0 - b[k]) * gi;
                }
            }
            for (v, &gi) in s.second_moment.iter_mut().zip(g) {
                *v = b[3] * *v + (1.0 - b[3]) * gi * gi;
            }
            let (rf, cf) = second_moment_factors(s, cfg.epsilon);
            let (rows, cols) = (s.rows, s.cols);
            let delta_sq: Vec<f64> = (0..rows * cols)
                .map(|idx| {
                    let d = g[idx] * rf[idx / cols] * cf[idx % cols];
                    d * d
                })
                .collect();
            let mut rm = vec![0.0; rows];
            let mut cm = vec![0.0; cols];
            row_means(&delta_sq, rows, cols, &mut rm);
            col_means(&delta_sq, rows, cols, &mut cm);
            for k in 0..3 {
                let beta = b[4 + k];
                for (r, x) in s.row_acc[k].iter_mut().zip(&rm) {
                    *r = beta * *r + (1.0 - beta) * x;
                }
                for (c, x) in s.col_acc[k].iter_mut().zip(&cm) {
                    *c = beta * *c + (1.0 - beta) * x;
                }
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|s| s.rows * s.cols).sum()
    }
}

pub fn update_state(state: &mut FeatureState, grads: &Grads, cfg: &FeatureConfig) -> Result<()> {
    state.update(grads, cfg)
}

/// Builds the `(num_params x 27)` feature matrix. Rows follow the tensor order of
/// `params`, row-major within each tensor.
pub fn feature_matrix(state: &FeatureState, params: &OptimizeeParams, grads: &Grads, cfg: &FeatureConfig) -> Result<Tensor> {
    let mut out = Vec::new();
    feature_matrix_into(state, params, grads, cfg, &mut out)?;
    let n = out.len() / NUM_FEATURES;
    Tensor::from_vec(n, NUM_FEATURES, out)
}

/// Same as [`feature_matrix`], writing into a reusable buffer.
pub fn feature_matrix_into(
    state: &FeatureState,
    params: &OptimizeeParams,
    grads: &Grads,
    cfg: &FeatureConfig,
    out: &mut Vec<f64>,
) -> Result<()> {
    if state.tensors.len() != params.tensors.len() || grads.tensors.len() != params.tensors.len() {
        return Err(Error::Dimension("params, grads and feature state disagree on tensor count".into()));
    }
    let eps = cfg.epsilon;
    out.clear();
    out.resize(state.num_params() * NUM_FEATURES, 0.0);
    let mut offset = 0;
    for ((s, p), g) in state.tensors.iter().zip(&params.tensors).zip(&grads.tensors) {
        let (rows, cols) = (s.rows, s.cols);
        if p.value.shape() != (rows, cols) || g.shape() != (rows, cols) {
            return Err(Error::Dimension(format!("tensor shape mismatch at offset {offset}")));
        }
        let n = rows * cols;
        let block = &mut out[offset * NUM_FEATURES..(offset + n) * NUM_FEATURES];
        let (rf_v, cf_v) = second_moment_factors(s, eps);
        let timescale: Vec<(Vec<f64>, Vec<f64>)> =
            (0..3).map(|k| factors(&s.row_acc[k], &s.col_acc[k], eps)).collect();
        let w = p.value.data();
        let g = g.data();
        for idx in 0..n {
            let (i, j) = (idx / cols, idx % cols);
            let f = &mut block[idx * NUM_FEATURES..(idx + 1) * NUM_FEATURES];
            let v = s.second_moment[idx];
            let rsqrt_v = 1.0 / (v + eps).sqrt();
            let base = rf_v[i] * cf_v[j];
            let delta = g[idx] * base;
            f[COL_PARAM] = w[idx];
            f[COL_SECOND_MOMENT] = v;
            f[COL_RSQRT_SECOND_MOMENT] = rsqrt_v;
            for k in 0..3 {
                let m = s.momentum[k][idx];
                let (rf, cf) = &timescale[k];
                let fac = rf[i] * cf[j];
                let (r, c) = (s.row_acc[k][i], s.col_acc[k][j]);
                f[COL_MOMENTUM + k] = m;
                f[COL_NORMALIZED_MOMENTUM + k] = m * rsqrt_v;
                f[COL_FACTORED_GRAD + k] = delta * fac;
                f[COL_ROW + k] = r;
                f[COL_COL + k] = c;
                f[COL_RSQRT_ROW + k] = 1.0 / (r + eps).sqrt();
                f[COL_RSQRT_COL + k] = 1.0 / (c + eps).sqrt();
                f[COL_FACTORED_MOMENTUM + k] = m * base * fac;
            }
        }
        if cfg.normalize {
            let mut sq = [0.0; NUM_FEATURES];
            for row in block.chunks_exact(NUM_FEATURES) {
                for (acc, x) in sq.iter_mut().zip(row) {
                    *acc += x * x;
                }
            }
            let inv: Vec<f64> = sq.iter().map(|s| 1.0 / (s / n as f64).sqrt().max(eps)).collect();
            for row in block.chunks_exact_mut(NUM_FEATURES) {
                for (x, s) in row.iter_mut().zip(&inv) {
                    *x *= s;
                }
            }
        }
        offset += n;
    }
    Ok(())
}
