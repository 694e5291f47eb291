//! Training of per-layer dynamically quantized neural networks.
//!
//! The pipeline alternates two optimizers over one model: gradient-based
//! quantization-aware training adapts the weights (and learnable clipping
//! scales) to a fixed bit allocation, while a gradient-free CMA-ES search
//! adapts the per-layer bit allocation to the fixed weights, under
//! model-size and mean-precision constraints folded in by a penalty
//! objective. Objective evaluations run over a moving super-batch, a FIFO
//! queue of mini-batches with configurable replacement policies.
//!
//! Modules:
//! - [`tensor`]: dense f64 tensors with reverse-mode autodiff and a
//!   straight-through gradient override.
//! - [`quant`]: uniform fake quantization with learnable clipping scales,
//!   weight normalization, and integer code extraction.
//! - [`network`]: small quantizable MLP/CNN/residual models with per-layer
//!   quantizer wiring and pinned 8-bit first/last layers.
//! - [`cmaes`]: covariance matrix adaptation evolution strategy.
//! - [`bitalloc`]: log-precision search space, constraints, and the
//!   penalty objective evaluated over a super-batch.
//! - [`data`] / [`superbatch`]: dataset loading and the moving super-batch.
//! - [`trainer`]: pretraining, the two session types, and the alternating
//!   driver.
//! - [`config`], [`metrics`], [`checkpoint`], [`cli`]: experiment front end.

pub mod bitalloc;
pub mod checkpoint;
pub mod cli;
pub mod cmaes;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod network;
pub mod quant;
pub mod rng;
pub mod superbatch;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{finite_diff_gradient, tensor_of, Tensor};
