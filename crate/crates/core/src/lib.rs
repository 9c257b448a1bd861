//! Router-based reward models on a small from-scratch transformer encoder:
//! a sparse MoE reward head, domain routing over full reward models, and
//! LoRA adapter switching on one shared backbone.

pub mod assembly;
pub mod bench;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod lora;
pub mod moe;
pub mod params;
pub mod pipeline;
pub mod router;
pub mod train;

pub use error::{Error, Result};
