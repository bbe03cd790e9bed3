//! Hierarchical vector-quantized autoencoders with stochastic or
//! straight-through code assignment, plus training, evaluation, and
//! rate-distortion tooling. Numerics come from the companion tensor crate.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod nn;
pub mod quant;
pub mod sweep;
pub mod train;

pub use config::{RunConfig, Shape, Variant};
pub use error::{Error, Result};
