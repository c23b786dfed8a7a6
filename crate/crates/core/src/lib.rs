//! Global budgeted structured pruning for a toy LLaMA-style decoder:
//! learn which FFN channels and KV head groups to keep under a single
//! heterogeneous-cost budget, calibrate per-unit scales, and materialize
//! a smaller dense checkpoint.

pub mod calibrate;
pub mod checkpoint_io;
pub mod data;
pub mod error;
pub mod gates;
pub mod materialize;
pub mod model;
pub mod optim;
pub mod presets;
pub mod pretrain;
pub mod projection;
pub mod registry;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};

/// Concrete single-precision aliases (the training default).
pub type Tensor32 = tensor::Tensor<f32>;
pub type Checkpoint32 = model::Checkpoint<f32>;
pub type Tape32 = tape::Tape<f32>;

/// Concrete double-precision aliases (oracles and gradient checks).
pub type Tensor64 = tensor::Tensor<f64>;
pub type Checkpoint64 = model::Checkpoint<f64>;
pub type Tape64 = tape::Tape<f64>;
