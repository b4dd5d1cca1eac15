//! Evaluation harness: train optimizees with a chosen optimizer over several
//! seeds, log loss curves, and expand sweep specs into batches of runs.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{AdamHyper, GridConfig, RunOutcome};
use crate::error::{Error, Result};
use crate::optim::{InnerOptimizer, Optimizer, OptimizerSpec};
use crate::optimizee::{
    forward, init_mlp, loss_and_grads, sample_batch, Activation, Batch, Dataset, DatasetSource, MlpSpec,
    OptimizeeParams, SamplingMode,
};
use crate::parametrization::ParamMode;
use crate::rng::RngStream;

/// Stream ids that keep the random draws of one run independent of each other.
pub const INIT_STREAM: u64 = 1;
pub const BATCH_STREAM: u64 = 2;
pub const EVAL_STREAM: u64 = 3;

/// A run counts as diverged once its loss exceeds this multiple of the initial loss.
pub const LOSS_CAP_MULTIPLIER: f64 = 100.0;

fn default_eval_batch() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTask {
    pub id: String,
    pub width: usize,
    pub depth: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub seeds: Vec<u64>,
    pub data: DatasetSource,
    /// Shared initialization seed. When unset each run seed also seeds the init.
    #[serde(default)]
    pub init_seed: Option<u64>,
    /// Seed of the fixed batch on which curves are measured.
    #[serde(default)]
    pub eval_seed: u64,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub sampling: SamplingMode,
}

impl EvalTask {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::config("batch_size", "batch sizes must be positive"));
        }
        if self.depth < 2 {
            return Err(Error::config("depth", format!("need at least 2 weight layers, got {}", self.depth)));
        }
        if self.width == 0 {
            return Err(Error::config("width", "must be positive"));
        }
        Ok(())
    }

    pub fn mlp_spec(&self, ds: &Dataset, optimizer: &Optimizer) -> MlpSpec {
        MlpSpec {
            activation: self.activation,
            multipliers: optimizer.multipliers(),
            ..MlpSpec::new(ds.input_dim, self.width, self.depth, ds.num_classes, optimizer.param_mode())
        }
    }

    pub fn log_interval(&self) -> usize {
        log_interval(self.steps)
    }
}

/// At most about 500 logged points per curve.
pub fn log_interval(steps: usize) -> usize {
    (steps / 500).max(1)
}

/// One optimizee being trained: parameters, optimizer state and the batch stream.
pub struct Run {
    pub params: OptimizeeParams,
    optimizer: Box<dyn InnerOptimizer + Send>,
    batch_rng: RngStream,
    batch_size: usize,
    sampling: SamplingMode,
    pub diverged: bool,
    pub steps_taken: usize,
}

impl Run {
    pub fn new(
        spec: &MlpSpec,
        optimizer: &Optimizer,
        init_rng: &mut RngStream,
        batch_rng: RngStream,
        batch_size: usize,
        sampling: SamplingMode,
    ) -> Result<Self> {
        let params = init_mlp(spec, init_rng)?;
        let optimizer = optimizer.instantiate(&params);
        Ok(Run { params, optimizer, batch_rng, batch_size, sampling, diverged: false, steps_taken: 0 })
    }

    /// One training step. Returns the minibatch loss before the update, or
    /// `None` once the run has diverged.
    pub fn step(&mut self, ds: &Dataset) -> Result<Option<f64>> {
        if self.diverged {
            return Ok(None);
        }
        let batch = sample_batch(ds, self.batch_size, self.sampling, &mut self.batch_rng)?;
        let (loss, grads) = loss_and_grads(&self.params, &batch)?;
        if !loss.is_finite() {
            self.diverged = true;
            return Ok(None);
        }
        match self.optimizer.step(&mut self.params, &grads) {
            Ok(()) => {}
            Err(e) if e.is_divergence() => {
                self.diverged = true;
                return Ok(None);
            }
            Err(e) => return Err(e),
        }
        self.steps_taken += 1;
        Ok(Some(loss))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub task_id: String,
    pub optimizer: String,
    pub param_mode: ParamMode,
    pub width: usize,
    pub depth: usize,
    pub seed: u64,
    pub step: usize,
    pub loss: f64,
    pub diverged: bool,
    pub ood: bool,
}

/// Loss at each logged step for one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedCurve {
    pub seed: u64,
    pub steps: Vec<usize>,
    pub losses: Vec<f64>,
    pub diverged: Vec<bool>,
}

impl SeedCurve {
    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least the step-0 point")
    }

    pub fn ever_diverged(&self) -> bool {
        self.diverged.iter().any(|&d| d)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveSet {
    pub task: EvalTask,
    pub optimizer: String,
    pub param_mode: ParamMode,
    /// Steps beyond this count are outside the learned optimizer's meta-training horizon.
    pub meta_horizon: Option<usize>,
    pub curves: Vec<SeedCurve>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: usize,
    pub mean: f64,
    /// Standard error across seeds; absent for a single seed.
    pub se: Option<f64>,
    pub diverged: usize,
}

/// Mean and standard error (sample std over √n).
pub fn mean_se(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

impl CurveSet {
    pub fn is_ood(&self, step: usize) -> bool {
        self.meta_horizon.is_some_and(|t| step > t)
    }

    pub fn rows(&self) -> Vec<CurveRow> {
        let mut out = Vec::new();
        for c in &self.curves {
            for ((&step, &loss), &diverged) in c.steps.iter().zip(&c.losses).zip(&c.diverged) {
                out.push(CurveRow {
                    task_id: self.task.id.clone(),
                    optimizer: self.optimizer.clone(),
                    param_mode: self.param_mode,
                    width: self.task.width,
                    depth: self.task.depth,
                    seed: c.seed,
                    step,
                    loss,
                    diverged,
                    ood: self.is_ood(step),
                });
            }
        }
        out
    }

    pub fn summary(&self) -> Vec<StepSummary> {
        let steps = &self.curves[0].steps;
        steps
            .iter()
            .enumerate()
            .map(|(i, &step)| {
                let vals: Vec<f64> = self.curves.iter().map(|c| c.losses[i]).collect();
                let (mean, se) = mean_se(&vals);
                let diverged = self.curves.iter().filter(|c| c.diverged[i]).count();
                StepSummary { step, mean, se, diverged }
            })
            .collect()
    }

    pub fn final_losses(&self) -> Vec<f64> {
        self.curves.iter().map(SeedCurve::final_loss).collect()
    }

    pub fn diverged_seeds(&self) -> usize {
        self.curves.iter().filter(|c| c.ever_diverged()).count()
    }
}

/// Trains one seed and logs the loss on a fixed evaluation batch every
/// `interval` steps (and at the last step). After divergence the remaining
/// points carry the loss cap.
pub fn run_seed(task: &EvalTask, ds: &Dataset, optimizer: &Optimizer, seed: u64, interval: usize) -> Result<SeedCurve> {
    let spec = task.mlp_spec(ds, optimizer);
    let mut init_rng = RngStream::new(task.init_seed.unwrap_or(seed), INIT_STREAM);
    let eval_batch = fixed_batch(ds, task.eval_batch_size, task.eval_seed)?;
    let mut run = Run::new(
        &spec,
        optimizer,
        &mut init_rng,
        RngStream::new(seed, BATCH_STREAM),
        task.batch_size,
        task.sampling,
    )?;
    let initial = forward(&run.params, &eval_batch)?.loss;
    let cap = LOSS_CAP_MULTIPLIER * initial;
    let mut curve = SeedCurve { seed, steps: Vec::new(), losses: Vec::new(), diverged: Vec::new() };
    let mut step = 0;
    loop {
        if step % interval == 0 || step == task.steps {
            let loss = if run.diverged { f64::INFINITY } else { forward(&run.params, &eval_batch)?.loss };
            if !(loss <= cap) {
                run.diverged = true;
            }
            curve.steps.push(step);
            curve.losses.push(if run.diverged { cap } else { loss });
            curve.diverged.push(run.diverged);
        }
        if step == task.steps {
            break;
        }
        if !run.diverged {
            run.step(ds)?;
        }
        step += 1;
    }
    Ok(curve)
}

pub fn fixed_batch(ds: &Dataset, size: usize, seed: u64) -> Result<Batch> {
    sample_batch(ds, size, SamplingMode::WithReplacement, &mut RngStream::new(seed, EVAL_STREAM))
}

pub fn run_eval(task: &EvalTask, ds: &Dataset, optimizer: &Optimizer) -> Result<CurveSet> {
    task.validate()?;
    let interval = task.log_interval();
    let curves = task
        .seeds
        .par_iter()
        .map(|&seed| run_seed(task, ds, optimizer, seed, interval))
        .collect::<Result<Vec<_>>>()?;
    Ok(CurveSet {
        task: task.clone(),
        optimizer: optimizer.name.clone(),
        param_mode: optimizer.param_mode(),
        meta_horizon: optimizer.meta_horizon(),
        curves,
    })
}

/// Runs every (task, optimizer) pair; seeds of all pairs share one pool.
pub fn run_batch(tasks: &[EvalTask], optimizers: &[Optimizer]) -> Result<Vec<CurveSet>> {
    let mut datasets = Vec::with_capacity(tasks.len());
    for t in tasks {
        t.validate()?;
        datasets.push(t.data.load()?);
    }
    let cells: Vec<(usize, usize, u64)> = (0..tasks.len())
        .flat_map(|ti| (0..optimizers.len()).flat_map(move |oi| tasks[ti].seeds.iter().map(move |&s| (ti, oi, s))))
        .collect();
    let curves = cells
        .par_iter()
        .map(|&(ti, oi, seed)| run_seed(&tasks[ti], &datasets[ti], &optimizers[oi], seed, tasks[ti].log_interval()))
        .collect::<Result<Vec<_>>>()?;
    let mut curves = curves.into_iter();
    let mut out = Vec::new();
    for task in tasks {
        for opt in optimizers {
            out.push(CurveSet {
                task: task.clone(),
                optimizer: opt.name.clone(),
                param_mode: opt.param_mode(),
                meta_horizon: opt.meta_horizon(),
                curves: curves.by_ref().take(task.seeds.len()).collect(),
            });
        }
    }
    Ok(out)
}

pub fn write_curves<W: Write>(sets: &[CurveSet], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for set in sets {
        for row in set.rows() {
            wtr.serialize(row)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_curves_csv(sets: &[CurveSet], path: &Path) -> Result<()> {
    write_curves(sets, std::fs::File::create(path)?)
}

/// Evaluation config: explicit tasks crossed with optimizers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub tasks: Vec<EvalTask>,
    pub optimizers: Vec<OptimizerSpec>,
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::config("tasks", "at least one task is required"));
        }
        if self.optimizers.is_empty() {
            return Err(Error::config("optimizers", "at least one optimizer is required"));
        }
        self.tasks.iter().try_for_each(EvalTask::validate)
    }

    pub fn run(&self) -> Result<Vec<CurveSet>> {
        self.validate()?;
        let optimizers = self.optimizers.iter().map(OptimizerSpec::resolve).collect::<Result<Vec<_>>>()?;
        run_batch(&self.tasks, &optimizers)
    }
}

/// Cross-product sweep over widths, depths and horizons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
    pub steps: Vec<usize>,
    pub seeds: Vec<u64>,
    pub batch_size: usize,
    pub data: DatasetSource,
    pub optimizers: Vec<OptimizerSpec>,
    #[serde(default)]
    pub init_seed: Option<u64>,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        for (field, empty) in [
            ("widths", self.widths.is_empty()),
            ("depths", self.depths.is_empty()),
            ("steps", self.steps.is_empty()),
            ("seeds", self.seeds.is_empty()),
            ("optimizers", self.optimizers.is_empty()),
        ] {
            if empty {
                return Err(Error::config(field, "must not be empty"));
            }
        }
        if self.widths.contains(&0) {
            return Err(Error::config("widths", "widths must be positive"));
        }
        if self.depths.iter().any(|&d| d < 2) {
            return Err(Error::config("depths", "depths must be at least 2"));
        }
        if self.steps.contains(&0) {
            return Err(Error::config("steps", "horizons must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        Ok(())
    }

    pub fn expand(&self) -> Result<EvalConfig> {
        self.validate()?;
        let mut tasks = Vec::new();
        for &width in &self.widths {
            for &depth in &self.depths {
                for &steps in &self.steps {
                    tasks.push(EvalTask {
                        id: format!("w{width}_d{depth}_s{steps}"),
                        width,
                        depth,
                        batch_size: self.batch_size,
                        steps,
                        seeds: self.seeds.clone(),
                        data: self.data.clone(),
                        init_seed: self.init_seed,
                        eval_seed: 0,
                        eval_batch_size: self.eval_batch_size,
                        activation: self.activation,
                        sampling: SamplingMode::default(),
                    });
                }
            }
        }
        Ok(EvalConfig { tasks, optimizers: self.optimizers.clone() })
    }
}

/// Objective for tuning µAdam/Adam multipliers: final loss of one seed.
pub fn adam_objective(task: &EvalTask, ds: &Dataset, mode: ParamMode, config: &GridConfig, seed: u64) -> Result<RunOutcome> {
    let hp: AdamHyper = config.hyper();
    let optimizer = Optimizer::adam(format!("adam_{}", config.config_id), hp, mode);
    let curve = run_seed(task, ds, &optimizer, seed, task.steps)?;
    Ok(RunOutcome { final_loss: curve.final_loss(), diverged: curve.ever_diverged() })
}
