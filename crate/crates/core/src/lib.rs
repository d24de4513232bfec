//! Differentiable adaptive computation time (DACT) for small transformer
//! classifiers, with entropy and patience early-exit baselines and an
//! efficiency/performance evaluation harness.

pub mod backbone;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod dact;
pub mod data;
pub mod error;
pub mod harness;
pub mod par;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use backbone::{Model, ModelConfig};
pub use error::{Error, Result};
