//! Generative-model-based knowledge distillation for small spatio-temporal
//! (video-like) classifiers.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`graph`], [`gradcheck`]: dense `f64` tensors, a tape-based
//!   reverse-mode autodiff graph and a finite-difference checker.
//! - [`nn`]: 3-D CNN backbones, the attention-based feature representation
//!   module and the conditional VAE feature reconstructor.
//! - [`losses`]: every distillation, reconstruction and classification loss.
//! - [`trainer`] and [`optim`]: teacher pretraining, the two-stage
//!   alternating distillation protocol, baselines and evaluation.
//! - [`data`]: the synthetic moving-blob clip dataset and its file format.
//! - [`checkpoint`], [`config`], [`metrics`]: on-disk formats.

mod bytes;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result, TensorError, TensorResult};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
