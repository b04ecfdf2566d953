//! Differentiable cell-based architecture search over an image encoder fused
//! with categorical metadata embeddings.

pub mod cell;
pub mod checkpoint;
pub mod cost;
pub mod data;
pub mod error;
pub mod genotype;
pub mod metadata;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod primitives;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
