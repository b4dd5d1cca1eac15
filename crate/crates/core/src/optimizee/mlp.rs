//! ReLU MLP classifier with manual forward and backward passes.
//!
//! Weights are stored `fan_in x fan_out`, so a layer computes
//! `z = mult * (h · W + b)` for a batch `h` of row vectors. Pre-activations are
//! recorded after the multiplier, i.e. exactly what enters the nonlinearity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parametrization::{
    forward_multiplier, init_std_with, InitVarianceMode, LayerGeometry, LayerRole, MultiplierSet, ParamMode,
};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z`.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputInit {
    /// Final layer starts at exactly zero.
    #[default]
    Zero,
    /// Final layer sampled with the parametrization's init std.
    Sampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub width: usize,
    /// Number of weight layers.
    pub depth: usize,
    pub num_classes: usize,
    pub mode: ParamMode,
    #[serde(default)]
    pub multipliers: MultiplierSet,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub output_init: OutputInit,
    #[serde(default)]
    pub init_variance_mode: InitVarianceMode,
}

impl MlpSpec {
    pub fn new(input_dim: usize, width: usize, depth: usize, num_classes: usize, mode: ParamMode) -> Self {
        MlpSpec {
            input_dim,
            width,
            depth,
            num_classes,
            mode,
            multipliers: MultiplierSet::default(),
            activation: Activation::default(),
            output_init: OutputInit::default(),
            init_variance_mode: InitVarianceMode::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::config("depth", format!("need at least 2 weight layers, got {}", self.depth)));
        }
        if self.width == 0 || self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::config("width", "width, input_dim and num_classes must be positive"));
        }
        self.multipliers.validate()
    }

    pub fn layer_geometries(&self) -> Vec<LayerGeometry> {
        (0..self.depth)
            .map(|l| {
                let fan_in = if l == 0 { self.input_dim } else { self.width };
                let fan_out = if l + 1 == self.depth { self.num_classes } else { self.width };
                LayerGeometry { fan_in, fan_out }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Weight,
    Bias,
}

/// One trainable tensor with the metadata the scaling rules need.
/// Biases are `(fan_out, 1)` column vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub value: Tensor,
    pub layer: usize,
    pub kind: ParamKind,
    pub role: LayerRole,
    pub geom: LayerGeometry,
}

/// Optimizee weights, laid out `[W0, b0, W1, b1, ...]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeeParams {
    pub tensors: Vec<ParamTensor>,
    pub mode: ParamMode,
    pub activation: Activation,
    /// Forward multiplier of each weight layer.
    pub multipliers: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grads {
    pub tensors: Vec<Tensor>,
}

impl Grads {
    pub fn scale(&self, s: f64) -> Grads {
        Grads { tensors: self.tensors.iter().map(|t| t.scale(s)).collect() }
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<u32>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardRecord {
    /// Input of each weight layer: the batch itself, then post-nonlinearity activations.
    pub inputs: Vec<Tensor>,
    /// Post-multiplier pre-activations of every layer; the last entry holds the logits.
    pub pre_activations: Vec<Tensor>,
    pub loss: f64,
}

impl ForwardRecord {
    pub fn logits(&self) -> &Tensor {
        self.pre_activations.last().expect("at least one layer")
    }

    pub fn diverged(&self) -> bool {
        !self.loss.is_finite()
    }
}

impl OptimizeeParams {
    pub fn num_layers(&self) -> usize {
        self.tensors.len() / 2
    }

    pub fn weight(&self, layer: usize) -> &ParamTensor {
        &self.tensors[2 * layer]
    }

    pub fn bias(&self, layer: usize) -> &ParamTensor {
        &self.tensors[2 * layer + 1]
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.value.is_finite())
    }

    pub fn zeros_like(&self) -> Grads {
        Grads { tensors: self.tensors.iter().map(|t| Tensor::zeros(t.value.rows(), t.value.cols())).collect() }
    }
}

pub fn init_mlp(spec: &MlpSpec, rng: &mut RngStream) -> Result<OptimizeeParams> {
    spec.validate()?;
    let mut tensors = Vec::with_capacity(2 * spec.depth);
    let mut multipliers = Vec::with_capacity(spec.depth);
    for (layer, geom) in spec.layer_geometries().into_iter().enumerate() {
        let role = LayerRole::for_layer(layer, spec.depth);
        let std = init_std_with(role, geom, spec.mode, spec.init_variance_mode);
        let w = if role == LayerRole::Output && spec.output_init == OutputInit::Zero {
            Tensor::zeros(geom.fan_in, geom.fan_out)
        } else {
            Tensor::gaussian(geom.fan_in, geom.fan_out, 0.0, std, rng)?
        };
        tensors.push(ParamTensor { value: w, layer, kind: ParamKind::Weight, role, geom });
        tensors.push(ParamTensor {
            value: Tensor::zeros(geom.fan_out, 1),
            layer,
            kind: ParamKind::Bias,
            role,
            geom,
        });
        multipliers.push(forward_multiplier(role, geom, spec.mode, &spec.multipliers)?);
    }
    Ok(OptimizeeParams { tensors, mode: spec.mode, activation: spec.activation, multipliers })
}

/// Runs the network on `batch`. A non-finite loss is reported through
/// [`ForwardRecord::diverged`], not as an error.
pub fn forward(params: &OptimizeeParams, batch: &Batch) -> Result<ForwardRecord> {
    let (inputs, pre_activations) = forward_pre_activations(params, &batch.x)?;
    let logits = pre_activations.last().expect("non-empty");
    let loss = mean_cross_entropy(logits, &batch.y)?;
    Ok(ForwardRecord { inputs, pre_activations, loss })
}

/// Layer inputs and post-multiplier pre-activations for a batch of inputs.
pub fn forward_pre_activations(params: &OptimizeeParams, x: &Tensor) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let layers = params.num_layers();
    let mut inputs = Vec::with_capacity(layers);
    let mut pre = Vec::with_capacity(layers);
    let mut h = x.clone();
    for l in 0..layers {
        let w = &params.weight(l).value;
        let b = params.bias(l).value.data();
        let mut z = h.matmul(w)?;
        let mult = params.multipliers[l];
        for r in 0..z.rows() {
            for (zi, bi) in z.row_mut(r).iter_mut().zip(b) {
                *zi = mult * (*zi + bi);
            }
        }
        let next = if l + 1 < layers { Some(z.map(|v| params.activation.apply(v))) } else { None };
        inputs.push(h);
        pre.push(z);
        if let Some(n) = next {
            h = n;
        } else {
            break;
        }
    }
    Ok((inputs, pre))
}

fn mean_cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::Dimension(format!("{} logit rows for {} labels", logits.rows(), labels.len())));
    }
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let y = y as usize;
        if y >= row.len() {
            return Err(Error::Validation(format!("label {y} out of range for {} classes", row.len())));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / labels.len() as f64)
}

/// Exact gradients of the mean cross-entropy loss.
pub fn backward(params: &OptimizeeParams, record: &ForwardRecord, batch: &Batch) -> Result<Grads> {
    let layers = params.num_layers();
    let n = batch.len() as f64;
    let logits = record.logits();

    // d loss / d logits = (softmax - onehot) / n
    let mut dz = Tensor::zeros(logits.rows(), logits.cols());
    for (r, &y) in batch.y.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let out = dz.row_mut(r);
        for (c, o) in out.iter_mut().enumerate() {
            *o = (row[c] - max).exp() / denom / n;
        }
        out[y as usize] -= 1.0 / n;
    }

    let mut grads = vec![Tensor::zeros(0, 0); 2 * layers];
    for l in (0..layers).rev() {
        let mult = params.multipliers[l];
        let da = dz.scale(mult);
        let h = &record.inputs[l];
        grads[2 * l] = h.t_matmul(&da)?;
        let mut bias_grad = vec![0.0; da.cols()];
        for r in 0..da.rows() {
            for (acc, v) in bias_grad.iter_mut().zip(da.row(r)) {
                *acc += v;
            }
        }
        grads[2 * l + 1] = Tensor::column(bias_grad);
        if l > 0 {
            let dh = da.matmul_t(&params.weight(l).value)?;
            let z_prev = &record.pre_activations[l - 1];
            dz = dh.zip_map(z_prev, |g, z| g * params.activation.derivative(z))?;
        }
    }
    Ok(Grads { tensors: grads })
}

/// Forward and backward on one batch.
pub fn loss_and_grads(params: &OptimizeeParams, batch: &Batch) -> Result<(f64, Grads)> {
    let record = forward(params, batch)?;
    let grads = backward(params, &record, batch)?;
    Ok((record.loss, grads))
}
