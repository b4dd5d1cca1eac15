//! Meta-training with persistent evolution strategies.
//!
//! Each antithetic pair keeps two inner runs alive across truncations, one
//! unrolled with `θ + ε` and one with `θ - ε`. The perturbations of a pair are
//! summed into `ξ` since the last episode reset, and the estimate is
//!
//! ```text
//! ĝ = 1/N Σ_i ξ_i (L⁺_i − L⁻_i) / (2σ²)
//! ```
//!
//! Both members of a pair see the same minibatches.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::RngCore;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{init_state, FeatureConfig, FeatureState};
use crate::harness::{INIT_STREAM, LOSS_CAP_MULTIPLIER};
use crate::lo::{
    init_lo, lo_step, write_checkpoint, CheckpointMeta, FeatureSettings, LoScratch, LoWeights, UpdateRuleConfig,
    HIDDEN_WIDTH,
};
use crate::optimizee::{
    forward, init_mlp, loss_and_grads, sample_batch, Activation, Dataset, DatasetSource, MlpSpec, OptimizeeParams,
    SamplingMode,
};
use crate::parametrization::ParamMode;
use crate::rng::RngStream;
use crate::tensor::l2_norm;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TruncationSchedule {
    Fixed,
    /// Truncation length grows linearly from `start` to the configured K over
    /// the first `over_steps` outer steps.
    LinearGrowth { start: usize, over_steps: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PesConfig {
    pub num_pairs: usize,
    pub sigma: f64,
    pub truncation: usize,
    pub horizon: usize,
    pub loss_cap_multiplier: f64,
    pub schedule: TruncationSchedule,
}

impl Default for PesConfig {
    fn default() -> Self {
        PesConfig {
            num_pairs: 8,
            sigma: 0.01,
            truncation: 50,
            horizon: 1000,
            loss_cap_multiplier: LOSS_CAP_MULTIPLIER,
            schedule: TruncationSchedule::Fixed,
        }
    }
}

impl PesConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_pairs == 0 {
            return Err(Error::config("num_pairs", "must be at least 1"));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::config("sigma", format!("must be positive, got {}", self.sigma)));
        }
        if self.truncation == 0 || self.truncation > self.horizon {
            return Err(Error::config(
                "truncation",
                format!("need 1 <= truncation <= horizon, got {} and {}", self.truncation, self.horizon),
            ));
        }
        if !(self.loss_cap_multiplier > 0.0) {
            return Err(Error::config("loss_cap_multiplier", "must be positive"));
        }
        Ok(())
    }

    pub fn truncation_at(&self, outer_step: usize) -> usize {
        match self.schedule {
            TruncationSchedule::Fixed => self.truncation,
            TruncationSchedule::LinearGrowth { start, over_steps } => {
                if over_steps == 0 || outer_step >= over_steps {
                    return self.truncation;
                }
                let start = start.clamp(1, self.truncation) as f64;
                let k = start + (self.truncation as f64 - start) * outer_step as f64 / over_steps as f64;
                (k.round() as usize).clamp(1, self.truncation)
            }
        }
    }
}

/// An inner problem whose trajectory depends on a flat parameter vector θ.
pub trait MetaProblem: Sync {
    /// θ in whatever form `step` needs.
    type Prepared: Send + Sync;
    /// One inner run. Both members of a pair start from a clone of the same state.
    type State: Clone + Send + Serialize + DeserializeOwned;

    fn dim(&self) -> usize;
    fn prepare(&self, theta: &[f64]) -> Result<Self::Prepared>;
    /// Starts a fresh episode.
    fn reset(&self, rng: &mut RngStream) -> Result<Self::State>;
    fn loss_cap(&self, state: &Self::State) -> f64;
    /// Advances one inner step and returns its loss, or `None` on divergence.
    fn step(&self, prepared: &Self::Prepared, state: &mut Self::State) -> Option<f64>;
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "S: Serialize + DeserializeOwned")]
pub struct Pair<S> {
    pub plus: S,
    pub minus: S,
    pub xi: Vec<f64>,
    pub step: usize,
    pub rng: RngStream,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "S: Serialize + DeserializeOwned")]
pub struct Particles<S> {
    pub pairs: Vec<Pair<S>>,
}

impl<S: Clone + Serialize + DeserializeOwned> Particles<S> {
    pub fn new<P: MetaProblem<State = S>>(problem: &P, cfg: &PesConfig, rng: &RngStream) -> Result<Self> {
        let pairs = (0..cfg.num_pairs)
            .map(|i| {
                let mut rng = rng.child(i as u64);
                let state = problem.reset(&mut rng)?;
                Ok(Pair { plus: state.clone(), minus: state, xi: vec![0.0; problem.dim()], step: 0, rng })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Particles { pairs })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PesEstimate {
    pub grad: Vec<f64>,
    pub mean_loss: f64,
    pub diverged_pairs: usize,
}

/// Per-pair contribution `ξ (L⁺ − L⁻) / (2σ²)`.
pub fn pair_contribution(xi: &[f64], loss_plus: f64, loss_minus: f64, sigma: f64) -> Vec<f64> {
    let c = (loss_plus - loss_minus) / (2.0 * sigma * sigma);
    xi.iter().map(|x| x * c).collect()
}

/// Mean loss of `steps` inner steps; losses above the cap (or divergence)
/// count as the cap for the rest of the truncation.
fn unroll<P: MetaProblem>(problem: &P, prepared: &P::Prepared, state: &mut P::State, steps: usize) -> (f64, bool) {
    let cap = problem.loss_cap(state);
    let mut total = 0.0;
    for i in 0..steps {
        match problem.step(prepared, state) {
            Some(l) if l.is_finite() && l <= cap => total += l,
            _ => {
                total += cap * (steps - i) as f64;
                return (total / steps as f64, true);
            }
        }
    }
    (total / steps as f64, false)
}

struct PairResult {
    contribution: Vec<f64>,
    mean_loss: f64,
    diverged: bool,
}

fn run_pair<P: MetaProblem>(
    problem: &P,
    theta: &[f64],
    pair: &mut Pair<P::State>,
    cfg: &PesConfig,
    truncation: usize,
) -> Result<PairResult> {
    let eps: Vec<f64> = (0..theta.len()).map(|_| cfg.sigma * pair.rng.normal()).collect();
    let theta_plus: Vec<f64> = theta.iter().zip(&eps).map(|(t, e)| t + e).collect();
    let theta_minus: Vec<f64> = theta.iter().zip(&eps).map(|(t, e)| t - e).collect();
    let steps = truncation.min(cfg.horizon - pair.step);
    let (lp, dp) = unroll(problem, &problem.prepare(&theta_plus)?, &mut pair.plus, steps);
    let (lm, dm) = unroll(problem, &problem.prepare(&theta_minus)?, &mut pair.minus, steps);
    for (x, e) in pair.xi.iter_mut().zip(&eps) {
        *x += e;
    }
    let contribution = pair_contribution(&pair.xi, lp, lm, cfg.sigma);
    pair.step += steps;
    let diverged = dp || dm;
    if diverged || pair.step >= cfg.horizon {
        let state = problem.reset(&mut pair.rng)?;
        pair.plus = state.clone();
        pair.minus = state;
        pair.xi.iter_mut().for_each(|x| *x = 0.0);
        pair.step = 0;
    }
    Ok(PairResult { contribution, mean_loss: 0.5 * (lp + lm), diverged })
}

/// One PES truncation over every pair. Pairs run in parallel; the reduction is
/// an ordered sum by pair index so the result does not depend on scheduling.
pub fn pes_truncation<P: MetaProblem>(
    problem: &P,
    theta: &[f64],
    particles: &mut Particles<P::State>,
    cfg: &PesConfig,
    truncation: usize,
) -> Result<PesEstimate>
where
    P::State: Serialize + DeserializeOwned,
{
    if theta.len() != problem.dim() {
        return Err(Error::Dimension(format!("θ has length {}, problem expects {}", theta.len(), problem.dim())));
    }
    let results = particles
        .pairs
        .par_iter_mut()
        .map(|pair| run_pair(problem, theta, pair, cfg, truncation))
        .collect::<Result<Vec<_>>>()?;
    let n = results.len() as f64;
    let mut grad = vec![0.0; theta.len()];
    let mut mean_loss = 0.0;
    let mut diverged_pairs = 0;
    for r in &results {
        for (g, c) in grad.iter_mut().zip(&r.contribution) {
            *g += c;
        }
        mean_loss += r.mean_loss;
        diverged_pairs += r.diverged as usize;
    }
    grad.iter_mut().for_each(|g| *g /= n);
    Ok(PesEstimate { grad, mean_loss: mean_loss / n, diverged_pairs })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OuterSchedule {
    pub max_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub final_lr: f64,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OuterSchedule {
    fn default() -> Self {
        OuterSchedule {
            max_lr: 3e-3,
            warmup_steps: 100,
            total_steps: 5000,
            final_lr: 1e-3,
            clip_norm: 1.0,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OuterSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            return Err(Error::config("warmup_steps", "must be smaller than total_steps"));
        }
        if !(self.max_lr > 0.0) || !(self.final_lr > 0.0) {
            return Err(Error::config("max_lr", "learning rates must be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm", "must be positive"));
        }
        Ok(())
    }

    /// Zero-indexed: `lr(0) = 0`, linear up to `max_lr` at `warmup_steps`, then
    /// cosine down to exactly `final_lr` at `total_steps - 1`.
    pub fn lr_at(&self, t: usize) -> f64 {
        if t < self.warmup_steps {
            return self.max_lr * t as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(1 + self.warmup_steps);
        let progress = if span == 0 { 1.0 } else { ((t - self.warmup_steps) as f64 / span as f64).min(1.0) };
        self.final_lr + (self.max_lr - self.final_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamWState {
    pub fn new(dim: usize) -> Self {
        AdamWState { m: vec![0.0; dim], v: vec![0.0; dim], t: 0 }
    }
}

/// Clips `grad` to the schedule's global norm and applies one AdamW step at
/// outer step `t`. Returns the pre-clip gradient norm.
pub fn outer_step(theta: &mut [f64], grad: &[f64], state: &mut AdamWState, schedule: &OuterSchedule, t: usize) -> f64 {
    let norm = l2_norm(grad);
    let clip = if norm > schedule.clip_norm { schedule.clip_norm / norm } else { 1.0 };
    let lr = schedule.lr_at(t);
    state.t += 1;
    let bc1 = 1.0 - schedule.beta1.powi(state.t as i32);
    let bc2 = 1.0 - schedule.beta2.powi(state.t as i32);
    for i in 0..theta.len() {
        let g = grad[i] * clip;
        state.m[i] = schedule.beta1 * state.m[i] + (1.0 - schedule.beta1) * g;
        state.v[i] = schedule.beta2 * state.v[i] + (1.0 - schedule.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        theta[i] -= lr * (m_hat / (v_hat.sqrt() + schedule.eps) + schedule.weight_decay * theta[i]);
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaTask {
    pub width: usize,
    pub depth: usize,
    pub batch_size: usize,
    pub data: DatasetSource,
    #[serde(default)]
    pub activation: Activation,
}

/// Inner problem for meta-training a learned optimizer: θ is the flat φ.
pub struct LoMetaProblem {
    pub mode: ParamMode,
    pub tasks: Vec<(MetaTask, Dataset)>,
    pub settings: FeatureSettings,
    pub rule: UpdateRuleConfig,
    pub cap_multiplier: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LoInnerState {
    pub task: usize,
    pub params: OptimizeeParams,
    pub features: FeatureState,
    pub batch_rng: RngStream,
    pub loss_cap: f64,
}

pub struct PreparedLo {
    phi: LoWeights,
    feature_cfg: FeatureConfig,
}

impl LoMetaProblem {
    pub fn new(mode: ParamMode, tasks: &[MetaTask], settings: FeatureSettings, rule: UpdateRuleConfig, cap_multiplier: f64) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::config("tasks", "at least one meta-training task is required"));
        }
        rule.validate()?;
        let tasks = tasks.iter().map(|t| Ok((t.clone(), t.data.load()?))).collect::<Result<Vec<_>>>()?;
        Ok(LoMetaProblem { mode, tasks, settings, rule, cap_multiplier })
    }

    fn spec(&self, task: &MetaTask, ds: &Dataset) -> MlpSpec {
        MlpSpec { activation: task.activation, ..MlpSpec::new(ds.input_dim, task.width, task.depth, ds.num_classes, self.mode) }
    }
}

impl MetaProblem for LoMetaProblem {
    type Prepared = PreparedLo;
    type State = LoInnerState;

    fn dim(&self) -> usize {
        crate::lo::flat_len(crate::features::NUM_FEATURES, HIDDEN_WIDTH)
    }

    fn prepare(&self, theta: &[f64]) -> Result<PreparedLo> {
        let phi = LoWeights::unflatten(theta)?;
        let feature_cfg = phi.feature_config(&self.settings);
        Ok(PreparedLo { phi, feature_cfg })
    }

    fn reset(&self, rng: &mut RngStream) -> Result<LoInnerState> {
        let task = rng.below(self.tasks.len());
        let (t, ds) = &self.tasks[task];
        let episode_seed = rng.next_u64();
        let params = init_mlp(&self.spec(t, ds), &mut RngStream::new(episode_seed, INIT_STREAM))?;
        let batch_rng = RngStream::new(episode_seed, crate::harness::BATCH_STREAM);
        let first = sample_batch(ds, t.batch_size, SamplingMode::WithReplacement, &mut batch_rng.clone())?;
        let initial = forward(&params, &first)?.loss;
        Ok(LoInnerState {
            task,
            features: init_state(&params),
            params,
            batch_rng,
            loss_cap: self.cap_multiplier * initial,
        })
    }

    fn loss_cap(&self, state: &LoInnerState) -> f64 {
        state.loss_cap
    }

    fn step(&self, prepared: &PreparedLo, state: &mut LoInnerState) -> Option<f64> {
        let (t, ds) = &self.tasks[state.task];
        let batch = sample_batch(ds, t.batch_size, SamplingMode::WithReplacement, &mut state.batch_rng).ok()?;
        let (loss, grads) = loss_and_grads(&state.params, &batch).ok()?;
        if !loss.is_finite() {
            return None;
        }
        let mut scratch = LoScratch::default();
        lo_step(
            &prepared.phi,
            &prepared.feature_cfg,
            &self.rule,
            self.mode,
            &mut state.params,
            &mut state.features,
            &grads,
            &mut scratch,
        )
        .ok()?;
        Some(loss)
    }
}

/// Meta-training run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaTrainConfig {
    pub mode: ParamMode,
    pub tasks: Vec<MetaTask>,
    #[serde(default)]
    pub pes: PesConfig,
    #[serde(default)]
    pub schedule: OuterSchedule,
    #[serde(default)]
    pub features: FeatureSettings,
    #[serde(default)]
    pub update_rule: UpdateRuleConfig,
    #[serde(default)]
    pub seed: u64,
    /// Write φ every this many outer steps (0 disables intermediate checkpoints).
    #[serde(default)]
    pub checkpoint_every: usize,
    /// When false, `wall_ms` in the log is always 0 so logs are reproducible.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl MetaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.pes.validate()?;
        self.schedule.validate()?;
        self.update_rule.validate()?;
        if self.tasks.is_empty() {
            return Err(Error::config("tasks", "at least one meta-training task is required"));
        }
        for t in &self.tasks {
            if t.width == 0 || t.depth < 2 || t.batch_size == 0 {
                return Err(Error::config("tasks", "tasks need width >= 1, depth >= 2 and batch_size >= 1"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaLogRow {
    pub outer_step: usize,
    pub lr: f64,
    pub mean_inner_loss: f64,
    pub grad_norm: f64,
    pub diverged_pairs: usize,
    pub wall_ms: u64,
}

/// Everything needed to continue meta-training bit-identically.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetaSnapshot {
    pub theta: Vec<f64>,
    pub adamw: AdamWState,
    pub outer_step: usize,
    pub particles: Particles<LoInnerState>,
}

pub struct MetaTrainer {
    pub config: MetaTrainConfig,
    pub problem: LoMetaProblem,
    pub theta: Vec<f64>,
    pub adamw: AdamWState,
    pub outer_step: usize,
    pub particles: Particles<LoInnerState>,
}

impl MetaTrainer {
    pub fn new(config: MetaTrainConfig) -> Result<Self> {
        config.validate()?;
        let problem = LoMetaProblem::new(
            config.mode,
            &config.tasks,
            config.features,
            config.update_rule,
            config.pes.loss_cap_multiplier,
        )?;
        let root = RngStream::new(config.seed, 0);
        let theta = init_lo(&mut root.child(0)).flatten();
        let particles = Particles::new(&problem, &config.pes, &root.child(1))?;
        Ok(MetaTrainer { adamw: AdamWState::new(theta.len()), theta, outer_step: 0, particles, problem, config })
    }

    pub fn from_snapshot(config: MetaTrainConfig, snap: MetaSnapshot) -> Result<Self> {
        config.validate()?;
        let problem = LoMetaProblem::new(
            config.mode,
            &config.tasks,
            config.features,
            config.update_rule,
            config.pes.loss_cap_multiplier,
        )?;
        if snap.theta.len() != problem.dim() || snap.particles.pairs.len() != config.pes.num_pairs {
            return Err(Error::Validation("snapshot does not match the run configuration".into()));
        }
        Ok(MetaTrainer {
            config,
            problem,
            theta: snap.theta,
            adamw: snap.adamw,
            outer_step: snap.outer_step,
            particles: snap.particles,
        })
    }

    pub fn snapshot(&self) -> MetaSnapshot {
        MetaSnapshot {
            theta: self.theta.clone(),
            adamw: self.adamw.clone(),
            outer_step: self.outer_step,
            particles: self.particles.clone(),
        }
    }

    pub fn done(&self) -> bool {
        self.outer_step >= self.config.schedule.total_steps
    }

    /// One outer step: a PES truncation followed by an AdamW update of θ.
    pub fn step(&mut self) -> Result<MetaLogRow> {
        let start = Instant::now();
        let t = self.outer_step;
        let k = self.config.pes.truncation_at(t);
        let est = pes_truncation(&self.problem, &self.theta, &mut self.particles, &self.config.pes, k)?;
        let lr = self.config.schedule.lr_at(t);
        let grad_norm = outer_step(&mut self.theta, &est.grad, &mut self.adamw, &self.config.schedule, t);
        self.outer_step += 1;
        Ok(MetaLogRow {
            outer_step: t,
            lr,
            mean_inner_loss: est.mean_loss,
            grad_norm,
            diverged_pairs: est.diverged_pairs,
            wall_ms: if self.config.record_wall_time { start.elapsed().as_millis() as u64 } else { 0 },
        })
    }

    pub fn phi(&self) -> LoWeights {
        LoWeights::unflatten(&self.theta).expect("θ length is checked at construction")
    }

    pub fn checkpoint_meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            mode: self.config.mode,
            features: self.config.features,
            update_rule: self.config.update_rule,
            meta_train_horizon: self.config.pes.horizon,
            outer_steps: self.outer_step,
            num_features: crate::features::NUM_FEATURES,
            hidden: HIDDEN_WIDTH,
        }
    }

    /// Runs to `total_steps`, writing the log, periodic checkpoints and a final
    /// checkpoint `phi.mulo` plus resume snapshot `snapshot.json` into `out_dir`.
    pub fn run(&mut self, out_dir: &Path, mut on_row: impl FnMut(&MetaLogRow)) -> Result<MetaTrainOutputs> {
        std::fs::create_dir_all(out_dir)?;
        let log_path = out_dir.join("meta_train_log.csv");
        let resumed = self.outer_step > 0 && log_path.exists();
        let file = std::fs::OpenOptions::new().create(true).append(resumed).write(true).truncate(!resumed).open(&log_path)?;
        let mut wtr = csv::WriterBuilder::new().has_headers(!resumed).from_writer(file);
        let ckpt = out_dir.join("phi.mulo");
        while !self.done() {
            let row = self.step()?;
            on_row(&row);
            wtr.serialize(&row)?;
            let every = self.config.checkpoint_every;
            if every > 0 && self.outer_step % every == 0 && !self.done() {
                wtr.flush()?;
                write_checkpoint(&ckpt, &self.phi(), &self.checkpoint_meta())?;
                write_snapshot(&out_dir.join("snapshot.json"), &self.snapshot())?;
            }
        }
        wtr.flush()?;
        write_checkpoint(&ckpt, &self.phi(), &self.checkpoint_meta())?;
        write_snapshot(&out_dir.join("snapshot.json"), &self.snapshot())?;
        Ok(MetaTrainOutputs { checkpoint: ckpt, log: log_path })
    }
}

#[derive(Clone, Debug)]
pub struct MetaTrainOutputs {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

pub fn write_snapshot(path: &Path, snap: &MetaSnapshot) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut f, snap)?;
    f.flush()?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<MetaSnapshot> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    Ok(serde_json::from_reader(f)?)
}
