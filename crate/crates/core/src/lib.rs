//! Learned optimizers for MLPs under standard and maximal-update parametrizations.
//!
//! The optimizee is a ReLU MLP classifier with hand-written backprop. A learned
//! optimizer is a tiny per-parameter MLP over 27 gradient statistics; it is
//! meta-trained with persistent evolution strategies and compared against Adam,
//! µAdam and SGD by the evaluation harness.

pub mod baselines;
pub mod coordcheck;
pub mod error;
pub mod features;
pub mod harness;
pub mod lo;
pub mod optim;
pub mod optimizee;
pub mod parametrization;
pub mod pes;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
