//! One interface over every inner optimizer the harness can run.

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::baselines::{adam_step, sgd_step, AdamHyper, AdamState};
use crate::error::{Error, Result};
use crate::features::{init_state, FeatureConfig, FeatureState};
use crate::lo::{lo_step, read_checkpoint, CheckpointMeta, FeatureSettings, LoScratch, LoWeights, UpdateRuleConfig};
use crate::optimizee::{Grads, OptimizeeParams};
use crate::parametrization::{MultiplierSet, ParamMode};

pub trait InnerOptimizer {
    /// Applies one update. A `Diverged` error means the run is over.
    fn step(&mut self, params: &mut OptimizeeParams, grads: &Grads) -> Result<()>;
}

pub struct LearnedOptimizer {
    phi: Arc<LoWeights>,
    feature_cfg: FeatureConfig,
    rule: UpdateRuleConfig,
    state: FeatureState,
    scratch: LoScratch,
}

impl LearnedOptimizer {
    pub fn new(phi: Arc<LoWeights>, settings: &FeatureSettings, rule: UpdateRuleConfig, params: &OptimizeeParams) -> Self {
        let feature_cfg = phi.feature_config(settings);
        LearnedOptimizer { phi, feature_cfg, rule, state: init_state(params), scratch: LoScratch::default() }
    }
}

impl InnerOptimizer for LearnedOptimizer {
    fn step(&mut self, params: &mut OptimizeeParams, grads: &Grads) -> Result<()> {
        let mode = params.mode;
        lo_step(&self.phi, &self.feature_cfg, &self.rule, mode, params, &mut self.state, grads, &mut self.scratch)
    }
}

pub struct AdamOptimizer {
    hp: AdamHyper,
    state: AdamState,
}

impl AdamOptimizer {
    pub fn new(hp: AdamHyper, params: &OptimizeeParams) -> Self {
        AdamOptimizer { hp, state: AdamState::new(params) }
    }
}

impl InnerOptimizer for AdamOptimizer {
    fn step(&mut self, params: &mut OptimizeeParams, grads: &Grads) -> Result<()> {
        adam_step(&mut self.state, params, grads, &self.hp)
    }
}

pub struct SgdOptimizer {
    pub lr: f64,
}

impl InnerOptimizer for SgdOptimizer {
    fn step(&mut self, params: &mut OptimizeeParams, grads: &Grads) -> Result<()> {
        sgd_step(params, grads, self.lr)
    }
}

/// A learned optimizer loaded into memory together with how it was meta-trained.
#[derive(Clone, Debug)]
pub struct LoadedLo {
    pub phi: Arc<LoWeights>,
    pub meta: CheckpointMeta,
}

impl LoadedLo {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (phi, meta) = read_checkpoint(path)?;
        Ok(LoadedLo { phi: Arc::new(phi), meta })
    }
}

/// Resolved optimizer ready to be instantiated for a run.
#[derive(Clone, Debug)]
pub enum OptimizerKind {
    Learned(LoadedLo),
    Adam { hp: AdamHyper, mode: ParamMode },
    Sgd { lr: f64 },
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub name: String,
    pub kind: OptimizerKind,
}

impl Optimizer {
    pub fn learned(name: impl Into<String>, lo: LoadedLo) -> Self {
        Optimizer { name: name.into(), kind: OptimizerKind::Learned(lo) }
    }

    pub fn adam(name: impl Into<String>, hp: AdamHyper, mode: ParamMode) -> Self {
        Optimizer { name: name.into(), kind: OptimizerKind::Adam { hp, mode } }
    }

    /// Parametrization the optimizee must use with this optimizer.
    pub fn param_mode(&self) -> ParamMode {
        match &self.kind {
            OptimizerKind::Learned(lo) => lo.meta.mode,
            OptimizerKind::Adam { mode, .. } => *mode,
            OptimizerKind::Sgd { .. } => ParamMode::Sp,
        }
    }

    /// Forward multipliers the optimizee must use with this optimizer.
    pub fn multipliers(&self) -> MultiplierSet {
        match &self.kind {
            OptimizerKind::Adam { hp, mode: ParamMode::Mup } => hp.multipliers,
            _ => MultiplierSet::default(),
        }
    }

    /// Longest unroll the optimizer was meta-trained on, if it is learned.
    pub fn meta_horizon(&self) -> Option<usize> {
        match &self.kind {
            OptimizerKind::Learned(lo) => Some(lo.meta.meta_train_horizon),
            _ => None,
        }
    }

    pub fn instantiate(&self, params: &OptimizeeParams) -> Box<dyn InnerOptimizer + Send> {
        match &self.kind {
            OptimizerKind::Learned(lo) => Box::new(LearnedOptimizer::new(
                lo.phi.clone(),
                &lo.meta.features,
                lo.meta.update_rule,
                params,
            )),
            OptimizerKind::Adam { hp, .. } => Box::new(AdamOptimizer::new(*hp, params)),
            OptimizerKind::Sgd { lr } => Box::new(SgdOptimizer { lr: *lr }),
        }
    }
}

/// Optimizer as written in a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerSpec {
    /// A φ checkpoint; its sidecar fixes the parametrization.
    Learned { name: String, checkpoint: PathBuf },
    Adam {
        name: String,
        #[serde(default = "default_mode")]
        mode: ParamMode,
        #[serde(flatten)]
        hp: AdamHyper,
    },
    Sgd { name: String, lr: f64 },
}

fn default_mode() -> ParamMode {
    ParamMode::Sp
}

impl OptimizerSpec {
    pub fn name(&self) -> &str {
        match self {
            OptimizerSpec::Learned { name, .. } | OptimizerSpec::Adam { name, .. } | OptimizerSpec::Sgd { name, .. } => name,
        }
    }

    pub fn resolve(&self) -> Result<Optimizer> {
        let name = self.name().to_string();
        Ok(match self {
            OptimizerSpec::Learned { checkpoint, .. } => Optimizer::learned(name, LoadedLo::load(checkpoint)?),
            OptimizerSpec::Adam { mode, hp, .. } => {
                hp.validate()?;
                Optimizer::adam(name, *hp, *mode)
            }
            OptimizerSpec::Sgd { lr, .. } => {
                if !(*lr > 0.0) {
                    return Err(Error::config("lr", format!("SGD learning rate must be positive, got {lr}")));
                }
                Optimizer { name, kind: OptimizerKind::Sgd { lr: *lr } }
            }
        })
    }
}
