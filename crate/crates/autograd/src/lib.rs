//! Minimal reverse-mode autodiff for the reward-model stack: a tape
//! ([`Graph`]) over dense `f32` tensors, AdamW, seeded random streams, and a
//! named-tensor checkpoint format.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
mod kernels;
pub mod optim;
pub mod rng;
mod tensor;

pub use error::{CheckpointError, TensorError};
pub use graph::{Graph, Segment, Var, LAYER_NORM_EPS};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use tensor::{Tensor, TensorMap};
