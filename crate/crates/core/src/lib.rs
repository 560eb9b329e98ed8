//! Residual-frame motion representation for 3D ConvNets.
//!
//! Stacked absolute frame differences feed a 3D residual network (the motion
//! path); a 2D network over single RGB frames supplies appearance evidence,
//! and the two paths are fused by averaging class probabilities.

pub mod error;
pub mod evalfuse;
pub mod framestore;
pub mod models;
pub mod motioninput;
pub mod neuralcore;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
pub use neuralcore::Tensor;
