//! Standard (SP) and maximal-update (µP) scaling rules.
//!
//! Every weight tensor of an optimizee is tagged with a [`LayerRole`] and a
//! [`LayerGeometry`]. Together with the optimizee's [`ParamMode`] these fix three
//! numbers per tensor:
//!
//! | mode | role   | init std      | forward multiplier        | update scale |
//! |------|--------|---------------|---------------------------|--------------|
//! | µP   | input  | 1/√fan_in     | input_mult                | 1            |
//! | µP   | hidden | 1/√fan_in     | 1                         | 1/fan_in     |
//! | µP   | output | 1             | output_mult / fan_in      | 1            |
//! | SP   | any    | 1/√fan_in     | 1                         | 1            |
//!
//! The µP init std `1/√fan_in` reads `N(0, 1/√fan_in)` with the second argument as
//! a standard deviation. [`InitVarianceMode::Variance`] switches to the other
//! reading (variance `1/√fan_in`) for ablations.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamMode {
    Sp,
    Mup,
}

impl fmt::Display for ParamMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamMode::Sp => "sp",
            ParamMode::Mup => "mup",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerRole {
    Input,
    Hidden,
    Output,
}

impl LayerRole {
    /// Role of weight layer `index` in a network with `depth` weight layers.
    pub fn for_layer(index: usize, depth: usize) -> LayerRole {
        if index + 1 == depth {
            LayerRole::Output
        } else if index == 0 {
            LayerRole::Input
        } else {
            LayerRole::Hidden
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGeometry {
    pub fan_in: usize,
    pub fan_out: usize,
}

impl LayerGeometry {
    pub fn new(fan_in: usize, fan_out: usize) -> Result<Self> {
        if fan_in == 0 || fan_out == 0 {
            return Err(Error::Argument(format!("layer geometry must be positive, got {fan_in}x{fan_out}")));
        }
        Ok(LayerGeometry { fan_in, fan_out })
    }
}

/// Tunable constants layered on top of the µP rules. All ones for learned optimizers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiplierSet {
    pub input_mult: f64,
    pub output_mult: f64,
    pub hidden_lr_mult: f64,
}

impl Default for MultiplierSet {
    fn default() -> Self {
        MultiplierSet { input_mult: 1.0, output_mult: 1.0, hidden_lr_mult: 1.0 }
    }
}

impl MultiplierSet {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_mult", self.input_mult),
            ("output_mult", self.output_mult),
            ("hidden_lr_mult", self.hidden_lr_mult),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Argument(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitVarianceMode {
    /// `N(0, s)` means standard deviation `s`.
    #[default]
    Std,
    /// `N(0, s)` means variance `s`.
    Variance,
}

pub fn init_std(role: LayerRole, geom: LayerGeometry, mode: ParamMode) -> f64 {
    init_std_with(role, geom, mode, InitVarianceMode::Std)
}

pub fn init_std_with(role: LayerRole, geom: LayerGeometry, mode: ParamMode, reading: InitVarianceMode) -> f64 {
    let fan_in = geom.fan_in as f64;
    match (mode, role) {
        (ParamMode::Sp, _) => 1.0 / fan_in.sqrt(),
        (ParamMode::Mup, LayerRole::Output) => 1.0,
        (ParamMode::Mup, _) => match reading {
            InitVarianceMode::Std => 1.0 / fan_in.sqrt(),
            InitVarianceMode::Variance => fan_in.powf(-0.25),
        },
    }
}

pub fn forward_multiplier(
    role: LayerRole,
    geom: LayerGeometry,
    mode: ParamMode,
    tunables: &MultiplierSet,
) -> Result<f64> {
    tunables.validate()?;
    Ok(match (mode, role) {
        (ParamMode::Sp, _) => 1.0,
        (ParamMode::Mup, LayerRole::Output) => tunables.output_mult / geom.fan_in as f64,
        (ParamMode::Mup, LayerRole::Input) => tunables.input_mult,
        (ParamMode::Mup, LayerRole::Hidden) => 1.0,
    })
}

/// Per-tensor factor applied to the optimizer's proposed weight change.
pub fn update_scale(role: LayerRole, geom: LayerGeometry, mode: ParamMode) -> f64 {
    match (mode, role) {
        (ParamMode::Mup, LayerRole::Hidden) => 1.0 / geom.fan_in as f64,
        _ => 1.0,
    }
}
