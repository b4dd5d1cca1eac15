//! Coordinate check: how far each layer's pre-activations move from their
//! initial values on a fixed probe batch, tracked across widths.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{Run, BATCH_STREAM, INIT_STREAM};
use crate::optim::{Optimizer, OptimizerSpec};
use crate::optimizee::{forward_pre_activations, sample_batch, Activation, Dataset, DatasetSource, MlpSpec, SamplingMode};
use crate::parametrization::ParamMode;
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const PROBE_STREAM: u64 = 4;
/// Value recorded once a run has diverged or its statistic is no longer finite.
pub const STD_CAP: f64 = 1e8;

fn default_log_every() -> usize {
    10
}
fn default_probe() -> usize {
    256
}
fn default_depth() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordCheckConfig {
    pub optimizers: Vec<OptimizerSpec>,
    pub widths: Vec<usize>,
    #[serde(default = "default_depth")]
    pub depth: usize,
    pub steps: usize,
    pub seeds: Vec<u64>,
    pub batch_size: usize,
    pub data: DatasetSource,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default = "default_probe")]
    pub probe_batch_size: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl CoordCheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::config("widths", "need at least one positive width"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must not be empty"));
        }
        if self.depth < 2 {
            return Err(Error::config("depth", "must be at least 2"));
        }
        if self.log_every == 0 || self.batch_size == 0 || self.probe_batch_size == 0 {
            return Err(Error::config("log_every", "log_every and batch sizes must be positive"));
        }
        Ok(())
    }

    pub fn resolve_optimizers(&self) -> Result<Vec<Optimizer>> {
        if self.optimizers.is_empty() {
            return Err(Error::config("optimizers", "must not be empty"));
        }
        self.optimizers.iter().map(OptimizerSpec::resolve).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordCheckRecord {
    pub optimizer: String,
    pub param_mode: ParamMode,
    pub width: usize,
    pub seed: u64,
    pub layer: usize,
    pub step: usize,
    pub std: f64,
    pub diverged: bool,
}

/// Population std over every entry of `a - b`.
pub fn delta_std(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.len() as f64;
    let mean = a.data().iter().zip(b.data()).map(|(x, y)| x - y).sum::<f64>() / n;
    let var = a.data().iter().zip(b.data()).map(|(x, y)| (x - y - mean).powi(2)).sum::<f64>() / n;
    var.sqrt()
}

fn run_cell(
    cfg: &CoordCheckConfig,
    ds: &Dataset,
    optimizer: &Optimizer,
    width: usize,
    seed: u64,
) -> Result<Vec<CoordCheckRecord>> {
    let spec = MlpSpec {
        activation: cfg.activation,
        multipliers: optimizer.multipliers(),
        ..MlpSpec::new(ds.input_dim, width, cfg.depth, ds.num_classes, optimizer.param_mode())
    };
    let probe = sample_batch(ds, cfg.probe_batch_size, SamplingMode::WithReplacement, &mut RngStream::new(seed, PROBE_STREAM))?;
    let mut run = Run::new(
        &spec,
        optimizer,
        &mut RngStream::new(seed, INIT_STREAM),
        RngStream::new(seed, BATCH_STREAM),
        cfg.batch_size,
        SamplingMode::WithReplacement,
    )?;
    let (_, h0) = forward_pre_activations(&run.params, &probe.x)?;
    let mut out = Vec::new();
    for step in 0..=cfg.steps {
        if step % cfg.log_every == 0 || step == cfg.steps {
            let current = if run.diverged { None } else { Some(forward_pre_activations(&run.params, &probe.x)?.1) };
            for layer in 0..cfg.depth {
                let s = current.as_ref().map(|h| delta_std(&h[layer], &h0[layer]));
                let (std, diverged) = match s {
                    Some(v) if v.is_finite() && v <= STD_CAP => (v, false),
                    _ => (STD_CAP, true),
                };
                out.push(CoordCheckRecord {
                    optimizer: optimizer.name.clone(),
                    param_mode: optimizer.param_mode(),
                    width,
                    seed,
                    layer,
                    step,
                    std,
                    diverged: diverged || run.diverged,
                });
            }
        }
        if step < cfg.steps {
            run.step(ds)?;
        }
    }
    Ok(out)
}

/// Records for every optimizer, width and seed, in that nesting order.
pub fn run_coordcheck(cfg: &CoordCheckConfig, ds: &Dataset, optimizers: &[Optimizer]) -> Result<Vec<CoordCheckRecord>> {
    cfg.validate()?;
    if optimizers.is_empty() {
        return Err(Error::config("optimizers", "must not be empty"));
    }
    let cells: Vec<(usize, usize, u64)> = (0..optimizers.len())
        .flat_map(|o| cfg.widths.iter().flat_map(move |&w| cfg.seeds.iter().map(move |&s| (o, w, s))))
        .collect();
    let results = cells
        .par_iter()
        .map(|&(o, w, s)| run_cell(cfg, ds, &optimizers[o], w, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(results.into_iter().flatten().collect())
}

pub fn write_records<W: Write>(records: &[CoordCheckRecord], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in records {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

/// For one optimizer: per (layer, width), the maximum over steps of the
/// seed-averaged std.
pub fn max_std_by_layer_width(records: &[CoordCheckRecord], optimizer: &str) -> BTreeMap<(usize, usize), f64> {
    let mut sums: BTreeMap<(usize, usize, usize), (f64, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.optimizer == optimizer) {
        let e = sums.entry((r.layer, r.width, r.step)).or_insert((0.0, 0));
        e.0 += r.std;
        e.1 += 1;
    }
    let mut out: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for ((layer, width, _), (s, n)) in sums {
        let m = s / n as f64;
        let e = out.entry((layer, width)).or_insert(0.0);
        *e = e.max(m);
    }
    out
}

/// Per layer: max-over-steps std at the widest width divided by that at the narrowest.
pub fn width_ratios(records: &[CoordCheckRecord], optimizer: &str) -> BTreeMap<usize, f64> {
    let maxes = max_std_by_layer_width(records, optimizer);
    let mut per_layer: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    for ((layer, width), v) in maxes {
        per_layer.entry(layer).or_default().push((width, v));
    }
    per_layer
        .into_iter()
        .map(|(layer, mut v)| {
            v.sort_by_key(|(w, _)| *w);
            let (narrow, wide) = (v[0].1, v[v.len() - 1].1);
            (layer, wide / narrow)
        })
        .collect()
}
