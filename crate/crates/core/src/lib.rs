//! Transformer-based proton dose prediction.
//!
//! * [`tensor`]: dense tensors with reverse-mode automatic differentiation.
//! * [`model`]: convolutional encoder, causal transformer and convolutional decoder.
//! * [`physics`]: deterministic toy proton transport used to generate training data.
//! * [`training`]: MSE/LAMB training loop, augmentation and hyperparameter sweeps.
//! * [`evaluation`]: gamma analysis and relative error metrics.
//! * [`grid`]: voxel grids and the `DGRD` file format.

pub mod config;
pub mod error;
pub mod evaluation;
pub mod grid;
pub mod model;
pub mod physics;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
