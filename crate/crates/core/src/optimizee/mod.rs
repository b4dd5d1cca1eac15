//! The network being trained and the data it is trained on.

pub mod data;
pub mod mlp;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub use data::{load_dataset, sample_batch, Dataset, SamplingMode, SyntheticConfig};
pub use mlp::{
    backward, forward, forward_pre_activations, init_mlp, loss_and_grads, Activation, Batch, ForwardRecord, Grads,
    MlpSpec, OptimizeeParams, OutputInit, ParamKind, ParamTensor,
};

/// Where a task's data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticConfig),
    File { path: PathBuf },
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSource::Synthetic(cfg) => cfg.generate(),
            DatasetSource::File { path } => Dataset::load(path),
        }
    }
}
