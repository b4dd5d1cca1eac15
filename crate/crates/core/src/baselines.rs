//! Hand-designed optimizers and the multiplier grid search used to tune them.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimizee::{Grads, OptimizeeParams, ParamKind};
use crate::parametrization::{update_scale, LayerGeometry, LayerRole, MultiplierSet, ParamMode};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Decoupled (AdamW-style) decay. Zero for the inner-task baselines.
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub multipliers: MultiplierSet,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamHyper {
    pub fn new(lr: f64) -> Self {
        AdamHyper {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
            multipliers: MultiplierSet::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", format!("must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(name, format!("must lie in (0, 1), got {b}")));
            }
        }
        if !(self.eps >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("eps", "eps and weight_decay must be non-negative"));
        }
        self.multipliers.validate()
    }

    /// Learning rate actually applied to one tensor.
    pub fn effective_lr(&self, kind: ParamKind, role: LayerRole, geom: LayerGeometry, mode: ParamMode) -> f64 {
        match kind {
            ParamKind::Bias => self.lr,
            ParamKind::Weight => {
                let hidden_mult = if mode == ParamMode::Mup && role == LayerRole::Hidden {
                    self.multipliers.hidden_lr_mult
                } else {
                    1.0
                };
                self.lr * update_scale(role, geom, mode) * hidden_mult
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &OptimizeeParams) -> Self {
        let zeros = params.zeros_like().tensors;
        AdamState { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// Bias-corrected Adam on one flat buffer, with `eps` added to `sqrt(v_hat)`.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    w: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) {
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..w.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        w[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * w[i]);
    }
}

/// One Adam step over every tensor; the per-tensor learning rate follows the
/// optimizee's parametrization.
pub fn adam_step(state: &mut AdamState, params: &mut OptimizeeParams, grads: &Grads, hp: &AdamHyper) -> Result<()> {
    if grads.tensors.len() != params.tensors.len() || state.m.len() != params.tensors.len() {
        return Err(Error::Dimension("params, grads and Adam state disagree on tensor count".into()));
    }
    state.t += 1;
    let mode = params.mode;
    for (i, p) in params.tensors.iter_mut().enumerate() {
        let g = &grads.tensors[i];
        if g.shape() != p.value.shape() {
            return Err(Error::Dimension(format!("gradient {i} has shape {:?}, weight {:?}", g.shape(), p.value.shape())));
        }
        let lr = hp.effective_lr(p.kind, p.role, p.geom, mode);
        adam_update(
            p.value.data_mut(),
            g.data(),
            state.m[i].data_mut(),
            state.v[i].data_mut(),
            state.t,
            lr,
            hp.beta1,
            hp.beta2,
            hp.eps,
            hp.weight_decay,
        );
    }
    if !params.is_finite() {
        return Err(Error::Diverged("non-finite weight after Adam step".into()));
    }
    Ok(())
}

/// Plain SGD with one learning rate for every tensor.
pub fn sgd_step(params: &mut OptimizeeParams, grads: &Grads, lr: f64) -> Result<()> {
    if grads.tensors.len() != params.tensors.len() {
        return Err(Error::Dimension("params and grads disagree on tensor count".into()));
    }
    for (p, g) in params.tensors.iter_mut().zip(&grads.tensors) {
        for (w, gi) in p.value.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * gi;
        }
    }
    if !params.is_finite() {
        return Err(Error::Diverged("non-finite weight after SGD step".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lrs: Vec<f64>,
    pub input_mults: Vec<f64>,
    pub output_mults: Vec<f64>,
    pub hidden_lr_mults: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        let mults = vec![0.0625, 0.25, 1.0, 4.0, 16.0];
        GridSpec {
            lrs: vec![0.1, 0.01, 0.001, 0.0001],
            input_mults: mults.clone(),
            output_mults: mults.clone(),
            hidden_lr_mults: mults,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub config_id: usize,
    pub lr: f64,
    pub multipliers: MultiplierSet,
}

impl GridConfig {
    fn key(&self) -> [f64; 4] {
        let m = &self.multipliers;
        [self.lr, m.input_mult, m.output_mult, m.hidden_lr_mult]
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper { multipliers: self.multipliers, ..AdamHyper::new(self.lr) }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lrs", &self.lrs),
            ("input_mults", &self.input_mults),
            ("output_mults", &self.output_mults),
            ("hidden_lr_mults", &self.hidden_lr_mults),
        ] {
            if v.is_empty() {
                return Err(Error::config(name, "grid axis is empty"));
            }
            if v.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
                return Err(Error::config(name, "grid values must be positive and finite"));
            }
        }
        Ok(())
    }

    /// Cross product in `lr, input, output, hidden` order.
    pub fn configs(&self) -> Vec<GridConfig> {
        let mut out = Vec::new();
        for &lr in &self.lrs {
            for &input_mult in &self.input_mults {
                for &output_mult in &self.output_mults {
                    for &hidden_lr_mult in &self.hidden_lr_mults {
                        out.push(GridConfig {
                            config_id: out.len(),
                            lr,
                            multipliers: MultiplierSet { input_mult, output_mult, hidden_lr_mult },
                        });
                    }
                }
            }
        }
        out
    }
}

/// Final loss of one (config, seed) run. Diverged runs carry the loss cap.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunOutcome {
    pub final_loss: f64,
    pub diverged: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub config_id: usize,
    pub lr: f64,
    pub input_mult: f64,
    pub output_mult: f64,
    pub hidden_lr_mult: f64,
    pub seed: u64,
    pub final_loss: f64,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedConfig {
    pub config: GridConfig,
    pub mean_loss: f64,
    pub all_diverged: bool,
    pub diverged_seeds: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    /// Best first.
    pub ranking: Vec<RankedConfig>,
}

impl GridResult {
    pub fn best(&self) -> &RankedConfig {
        &self.ranking[0]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv_to(file)
    }

    pub fn write_csv_to<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for row in &self.rows {
            wtr.serialize(row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Runs `objective` for every (config, seed) cell and ranks configs by mean
/// final loss. Configs whose every seed diverged rank last; exact ties go to the
/// lexicographically smallest `(lr, input, output, hidden)` tuple.
pub fn grid_search<F>(grid: &GridSpec, seeds: &[u64], objective: F) -> Result<GridResult>
where
    F: Fn(&GridConfig, u64) -> Result<RunOutcome> + Sync,
{
    grid.validate()?;
    if seeds.is_empty() {
        return Err(Error::config("seeds", "at least one seed is required"));
    }
    let configs = grid.configs();
    let cells: Vec<(GridConfig, u64)> =
        configs.iter().flat_map(|c| seeds.iter().map(move |&s| (*c, s))).collect();
    let outcomes: Vec<RunOutcome> =
        cells.par_iter().map(|(c, s)| objective(c, *s)).collect::<Result<Vec<_>>>()?;

    let rows: Vec<GridRow> = cells
        .iter()
        .zip(&outcomes)
        .map(|((c, seed), o)| GridRow {
            config_id: c.config_id,
            lr: c.lr,
            input_mult: c.multipliers.input_mult,
            output_mult: c.multipliers.output_mult,
            hidden_lr_mult: c.multipliers.hidden_lr_mult,
            seed: *seed,
            final_loss: o.final_loss,
            diverged: o.diverged,
        })
        .collect();

    let mut ranking: Vec<RankedConfig> = configs
        .iter()
        .zip(outcomes.chunks(seeds.len()))
        .map(|(c, os)| {
            let diverged_seeds = os.iter().filter(|o| o.diverged).count();
            RankedConfig {
                config: *c,
                mean_loss: os.iter().map(|o| o.final_loss).sum::<f64>() / os.len() as f64,
                all_diverged: diverged_seeds == os.len(),
                diverged_seeds,
            }
        })
        .collect();
    ranking.sort_by(|a, b| {
        a.all_diverged
            .cmp(&b.all_diverged)
            .then(a.mean_loss.total_cmp(&b.mean_loss))
            .then_with(|| {
                let (ka, kb) = (a.config.key(), b.config.key());
                ka.iter().zip(&kb).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
            })
    });
    Ok(GridResult { rows, ranking })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizee::{init_mlp, MlpSpec};
    use crate::rng::RngStream;

    fn tiny(mode: ParamMode, width: usize) -> OptimizeeParams {
        init_mlp(&MlpSpec::new(3, width, 3, 2, mode), &mut RngStream::new(0, 0)).unwrap()
    }

    #[test]
    fn first_step_is_signed_lr() {
        let mut params = tiny(ParamMode::Sp, 4);
        let before = params.clone();
        let mut grads = params.zeros_like();
        let mut rng = RngStream::new(1, 0);
        for g in &mut grads.tensors {
            g.data_mut().iter_mut().for_each(|x| *x = rng.normal());
        }
        let hp = AdamHyper::new(0.01);
        let mut state = AdamState::new(&params);
        adam_step(&mut state, &mut params, &grads, &hp).unwrap();
        for ((a, b), g) in params.tensors.iter().zip(&before.tensors).zip(&grads.tensors) {
            for ((wa, wb), gi) in a.value.data().iter().zip(b.value.data()).zip(g.data()) {
                let expected = -0.01 * gi / (gi.abs() + 1e-8);
                assert!((wa - wb - expected).abs() < 1e-15);
                assert_eq!((wa - wb).signum(), -gi.signum());
            }
        }
    }

    #[test]
    fn mup_hidden_effective_lr() {
        let hp = AdamHyper { multipliers: MultiplierSet { hidden_lr_mult: 4.0, ..Default::default() }, ..AdamHyper::new(0.1) };
        let geom = LayerGeometry::new(1024, 1024).unwrap();
        let lr = hp.effective_lr(ParamKind::Weight, LayerRole::Hidden, geom, ParamMode::Mup);
        assert_eq!(lr, 0.1 * 4.0 / 1024.0);
        assert_eq!(hp.effective_lr(ParamKind::Weight, LayerRole::Hidden, geom, ParamMode::Sp), 0.1);
        assert_eq!(hp.effective_lr(ParamKind::Bias, LayerRole::Hidden, geom, ParamMode::Mup), 0.1);
        assert_eq!(hp.effective_lr(ParamKind::Weight, LayerRole::Output, geom, ParamMode::Mup), 0.1);
    }

    #[test]
    fn first_step_direction_is_gradient_scale_invariant() {
        let base = tiny(ParamMode::Mup, 8);
        let mut grads = base.zeros_like();
        let mut rng = RngStream::new(2, 0);
        for g in &mut grads.tensors {
            g.data_mut().iter_mut().for_each(|x| *x = rng.normal());
        }
        let hp = AdamHyper::new(0.003);
        let run = |c: f64| {
            let mut p = base.clone();
            let mut s = AdamState::new(&p);
            adam_step(&mut s, &mut p, &grads.scale(c), &hp).unwrap();
            p
        };
        let (a, b) = (run(1.0), run(1000.0));
        for (x, y) in a.tensors.iter().zip(&b.tensors) {
            for (u, v) in x.value.data().iter().zip(y.value.data()) {
                assert!((u - v).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mup_hidden_step_scales_with_inverse_fan_in() {
        let hp = AdamHyper::new(0.01);
        let step_at = |width: usize| {
            let mut p = tiny(ParamMode::Mup, width);
            let before = p.weight(1).value.clone();
            let mut g = p.zeros_like();
            g.tensors[2].data_mut().iter_mut().for_each(|x| *x = 1.0);
            let mut s = AdamState::new(&p);
            adam_step(&mut s, &mut p, &g, &hp).unwrap();
            (before.get(0, 0) - p.weight(1).value.get(0, 0)) * width as f64
        };
        let (a, b) = (step_at(16), step_at(256));
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn default_grid_has_500_configs() {
        let configs = GridSpec::default().configs();
        assert_eq!(configs.len(), 500);
        assert_eq!(configs[0].lr, 0.1);
        assert_eq!(configs[499].multipliers.hidden_lr_mult, 16.0);
    }

    #[test]
    fn fully_diverged_configs_rank_last() {
        let grid = GridSpec { lrs: vec![1.0, 2.0], input_mults: vec![1.0], output_mults: vec![1.0], hidden_lr_mults: vec![1.0] };
        // lr 1.0 diverges on every seed with a small cap; lr 2.0 has one finite seed with a huge loss.
        let result = grid_search(&grid, &[0, 1], |c, seed| {
            Ok(if c.lr == 1.0 {
                RunOutcome { final_loss: 0.5, diverged: true }
            } else if seed == 0 {
                RunOutcome { final_loss: 1e6, diverged: false }
            } else {
                RunOutcome { final_loss: 0.5, diverged: true }
            })
        })
        .unwrap();
        assert_eq!(result.best().config.lr, 2.0);
        assert!(result.ranking[1].all_diverged);
    }

    #[test]
    fn exact_ties_prefer_smallest_tuple() {
        let grid = GridSpec { lrs: vec![0.3, 0.1, 0.2], input_mults: vec![4.0, 1.0], output_mults: vec![1.0], hidden_lr_mults: vec![1.0] };
        let result = grid_search(&grid, &[7], |_, _| Ok(RunOutcome { final_loss: 1.0, diverged: false })).unwrap();
        assert_eq!(result.best().config.lr, 0.1);
        assert_eq!(result.best().config.multipliers.input_mult, 1.0);
    }

    #[test]
    fn empty_grid_axis_is_a_config_error() {
        let grid = GridSpec { lrs: vec![], ..GridSpec::default() };
        let err = grid_search(&grid, &[0], |_, _| Ok(RunOutcome { final_loss: 0.0, diverged: false })).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "lrs"));
    }

    #[test]
    fn csv_has_one_row_per_cell() {
        let grid = GridSpec { lrs: vec![0.1, 0.01], ..GridSpec::default() };
        let result = grid_search(&grid, &[1, 2], |c, s| Ok(RunOutcome { final_loss: c.lr * s as f64, diverged: false })).unwrap();
        let mut buf = Vec::new();
        result.write_csv_to(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "config_id,lr,input_mult,output_mult,hidden_lr_mult,seed,final_loss,diverged"
        );
        assert_eq!(lines.count(), 2 * 125 * 2);
    }
}
