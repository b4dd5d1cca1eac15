//! The per-parameter learned optimizer.
//!
//! A small MLP maps each parameter's feature row to a direction `d` and a
//! magnitude `m`; the weight then moves by
//!
//! ```text
//! w <- w - scale * λ1 * d * exp(λ2 * m)
//! ```
//!
//! where `scale` is the parametrization's update scale for the tensor
//! (`1/fan_in` for µP hidden weights, otherwise 1). The feature decays are part
//! of the learned weights, stored as logits and squashed with a sigmoid.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{self, FeatureConfig, FeatureState, DEFAULT_BETAS, DEFAULT_EPSILON, NUM_BETAS, NUM_FEATURES};
use crate::optimizee::{Grads, OptimizeeParams, ParamKind};
use crate::parametrization::{update_scale, ParamMode};
use crate::rng::RngStream;
use crate::tensor::{gemm, Tensor};

pub const HIDDEN_WIDTH: usize = 32;
pub const NUM_OUTPUTS: usize = 2;
/// Flat length of the default architecture: 27·32 + 32 + 32·2 + 2 + 7 = 969.
pub const LO_DIM: usize = NUM_FEATURES * HIDDEN_WIDTH + HIDDEN_WIDTH + HIDDEN_WIDTH * NUM_OUTPUTS + NUM_OUTPUTS + NUM_BETAS;
pub const INIT_STD: f64 = 0.01;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MULO";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Weights φ of the learned optimizer. Output column 0 is the direction `d`,
/// column 1 the magnitude `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoWeights {
    pub w1: Tensor,
    pub b1: Vec<f64>,
    pub w2: Tensor,
    pub b2: [f64; NUM_OUTPUTS],
    pub beta_logits: [f64; NUM_BETAS],
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl LoWeights {
    pub fn zeros(num_features: usize, hidden: usize) -> Self {
        LoWeights {
            w1: Tensor::zeros(num_features, hidden),
            b1: vec![0.0; hidden],
            w2: Tensor::zeros(hidden, NUM_OUTPUTS),
            b2: [0.0; NUM_OUTPUTS],
            beta_logits: DEFAULT_BETAS.map(logit),
        }
    }

    pub fn num_features(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn dim(&self) -> usize {
        flat_len(self.num_features(), self.hidden())
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(self.w1.data());
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(self.w2.data());
        v.extend_from_slice(&self.b2);
        v.extend_from_slice(&self.beta_logits);
        v
    }

    /// Inverse of [`LoWeights::flatten`] for the default 27→32→2 architecture.
    pub fn unflatten(flat: &[f64]) -> Result<Self> {
        Self::unflatten_with(flat, NUM_FEATURES, HIDDEN_WIDTH)
    }

    pub fn unflatten_with(flat: &[f64], num_features: usize, hidden: usize) -> Result<Self> {
        let expected = flat_len(num_features, hidden);
        if flat.len() != expected {
            return Err(Error::Argument(format!("flat length {} != expected {expected}", flat.len())));
        }
        let mut at = 0;
        let mut take = |n: usize| {
            let s = &flat[at..at + n];
            at += n;
            s
        };
        let w1 = Tensor::from_vec(num_features, hidden, take(num_features * hidden).to_vec())?;
        let b1 = take(hidden).to_vec();
        let w2 = Tensor::from_vec(hidden, NUM_OUTPUTS, take(hidden * NUM_OUTPUTS).to_vec())?;
        let b2 = take(NUM_OUTPUTS).try_into().unwrap();
        let beta_logits = take(NUM_BETAS).try_into().unwrap();
        Ok(LoWeights { w1, b1, w2, b2, beta_logits })
    }

    pub fn betas(&self) -> [f64; NUM_BETAS] {
        self.beta_logits.map(sigmoid)
    }

    /// Feature configuration implied by these weights.
    pub fn feature_config(&self, settings: &FeatureSettings) -> FeatureConfig {
        let betas = match settings.beta_mode {
            BetaMode::Learned => self.betas(),
            BetaMode::Fixed => DEFAULT_BETAS,
        };
        FeatureConfig { betas, epsilon: settings.epsilon, normalize: settings.normalize }
    }
}

pub fn flat_len(num_features: usize, hidden: usize) -> usize {
    num_features * hidden + hidden + hidden * NUM_OUTPUTS + NUM_OUTPUTS + NUM_BETAS
}

/// Gaussian weights with std 0.01, zero biases, default decays.
pub fn init_lo(rng: &mut RngStream) -> LoWeights {
    let mut lo = LoWeights::zeros(NUM_FEATURES, HIDDEN_WIDTH);
    lo.w1 = Tensor::gaussian(NUM_FEATURES, HIDDEN_WIDTH, 0.0, INIT_STD, rng).expect("positive std");
    lo.w2 = Tensor::gaussian(HIDDEN_WIDTH, NUM_OUTPUTS, 0.0, INIT_STD, rng).expect("positive std");
    lo
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaMode {
    /// Decays come from the sigmoid of φ's beta logits.
    #[default]
    Learned,
    /// Decays stay at their defaults.
    Fixed,
}

/// Feature options that are not part of φ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSettings {
    pub epsilon: f64,
    pub normalize: bool,
    pub beta_mode: BetaMode,
}

impl Default for FeatureSettings {
    fn default() -> Self {
        FeatureSettings { epsilon: DEFAULT_EPSILON, normalize: true, beta_mode: BetaMode::Learned }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateRuleConfig {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for UpdateRuleConfig {
    fn default() -> Self {
        UpdateRuleConfig { lambda1: 0.01, lambda2: 0.001 }
    }
}

impl UpdateRuleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 > 0.0 && self.lambda2 > 0.0) {
            return Err(Error::Argument(format!("lambdas must be positive, got {:?}", self)));
        }
        Ok(())
    }
}

/// Per-row outputs of the learned optimizer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoOutputs {
    pub m: Vec<f64>,
    pub d: Vec<f64>,
}

pub fn lo_forward(phi: &LoWeights, features: &Tensor) -> Result<LoOutputs> {
    let mut out = LoOutputs::default();
    let mut scratch = Vec::new();
    lo_forward_into(phi, features.data(), features.cols(), &mut scratch, &mut out)?;
    Ok(out)
}

/// `features` is a row-major `(rows x num_features)` buffer.
pub fn lo_forward_into(
    phi: &LoWeights,
    features: &[f64],
    num_features: usize,
    hidden_buf: &mut Vec<f64>,
    out: &mut LoOutputs,
) -> Result<()> {
    if num_features != phi.num_features() || features.len() % num_features.max(1) != 0 {
        return Err(Error::Dimension(format!(
            "feature rows of width {num_features} for an optimizer expecting {}",
            phi.num_features()
        )));
    }
    let rows = features.len() / num_features;
    let hidden = phi.hidden();
    hidden_buf.clear();
    hidden_buf.resize(rows * hidden, 0.0);
    for r in 0..rows {
        hidden_buf[r * hidden..(r + 1) * hidden].copy_from_slice(&phi.b1);
    }
    gemm(rows, num_features, hidden, features, num_features, 1, phi.w1.data(), hidden, 1, hidden_buf, 1.0);
    hidden_buf.iter_mut().for_each(|h| *h = h.max(0.0));
    out.d.clear();
    out.m.clear();
    out.d.reserve(rows);
    out.m.reserve(rows);
    let w2 = phi.w2.data();
    for r in 0..rows {
        let h = &hidden_buf[r * hidden..(r + 1) * hidden];
        let mut d = phi.b2[0];
        let mut m = phi.b2[1];
        for (k, hk) in h.iter().enumerate() {
            d += hk * w2[k * NUM_OUTPUTS];
            m += hk * w2[k * NUM_OUTPUTS + 1];
        }
        out.d.push(d);
        out.m.push(m);
    }
    if out.d.iter().chain(&out.m).any(|x| !x.is_finite()) {
        return Err(Error::Diverged("learned optimizer produced a non-finite output".into()));
    }
    Ok(())
}

/// `w <- w - scale * λ1 * d * exp(λ2 * m)`, elementwise.
pub fn apply_update(w: &mut [f64], m: &[f64], d: &[f64], cfg: &UpdateRuleConfig, scale: f64) -> Result<()> {
    if w.len() != m.len() || w.len() != d.len() {
        return Err(Error::Dimension(format!("update of {} weights with {} / {} outputs", w.len(), m.len(), d.len())));
    }
    let step = scale * cfg.lambda1;
    let mut finite = true;
    for ((wi, &mi), &di) in w.iter_mut().zip(m).zip(d) {
        *wi -= step * di * (cfg.lambda2 * mi).exp();
        finite &= wi.is_finite();
    }
    if !finite {
        return Err(Error::Diverged("non-finite weight after update".into()));
    }
    Ok(())
}

/// Scratch buffers reused across learned-optimizer steps.
#[derive(Clone, Debug, Default)]
pub struct LoScratch {
    features: Vec<f64>,
    hidden: Vec<f64>,
    outputs: LoOutputs,
}

/// One full learned-optimizer step: update features from `grads`, run φ on every
/// parameter, and apply the scaled update to each tensor.
#[allow(clippy::too_many_arguments)]
pub fn lo_step(
    phi: &LoWeights,
    feature_cfg: &FeatureConfig,
    rule: &UpdateRuleConfig,
    mode: ParamMode,
    params: &mut OptimizeeParams,
    state: &mut FeatureState,
    grads: &Grads,
    scratch: &mut LoScratch,
) -> Result<()> {
    state.update(grads, feature_cfg)?;
    features::feature_matrix_into(state, params, grads, feature_cfg, &mut scratch.features)?;
    lo_forward_into(phi, &scratch.features, NUM_FEATURES, &mut scratch.hidden, &mut scratch.outputs)?;
    let mut offset = 0;
    for t in &mut params.tensors {
        let n = t.value.len();
        let scale = match t.kind {
            ParamKind::Weight => update_scale(t.role, t.geom, mode),
            ParamKind::Bias => 1.0,
        };
        let range = offset..offset + n;
        apply_update(
            t.value.data_mut(),
            &scratch.outputs.m[range.clone()],
            &scratch.outputs.d[range],
            rule,
            scale,
        )?;
        offset += n;
    }
    Ok(())
}

/// Metadata stored next to a φ checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub mode: ParamMode,
    pub features: FeatureSettings,
    pub update_rule: UpdateRuleConfig,
    /// Longest inner unroll seen during meta-training.
    pub meta_train_horizon: usize,
    pub outer_steps: usize,
    pub num_features: usize,
    pub hidden: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn checkpoint_bytes(phi: &LoWeights) -> Vec<u8> {
    let flat = phi.flatten();
    let mut out = Vec::with_capacity(16 + 8 * flat.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for x in flat {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Writes `path` (binary φ) and `path.json` (metadata).
pub fn write_checkpoint(path: &Path, phi: &LoWeights, meta: &CheckpointMeta) -> Result<()> {
    fs::write(path, checkpoint_bytes(phi))?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(meta)? + "\n")?;
    Ok(())
}

pub fn parse_checkpoint(bytes: &[u8], num_features: usize, hidden: usize) -> Result<LoWeights> {
    if bytes.len() < 16 {
        return Err(Error::Format { offset: bytes.len() as u64, msg: "checkpoint header truncated".into() });
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format { offset: 0, msg: "bad checkpoint magic".into() });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format { offset: 4, msg: format!("unsupported checkpoint version {version}") });
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + 8 * len {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("expected {} floats, file holds {} bytes of payload", len, bytes.len() - 16),
        });
    }
    let flat: Vec<f64> = bytes[16..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    LoWeights::unflatten_with(&flat, num_features, hidden)
}

pub fn read_checkpoint(path: &Path) -> Result<(LoWeights, CheckpointMeta)> {
    let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    let phi = parse_checkpoint(&fs::read(path)?, meta.num_features, meta.hidden)?;
    Ok((phi, meta))
}
