//! Minimal dense-network engine: matrices, dense layers with explicit
//! forward/backward passes, Adam, and loss primitives. Everything above
//! this module is architecture-agnostic.
//!
//! All values are `f64`; matrices are row-major. Functions are pure over
//! caller-owned state, so independent training loops can run in parallel
//! without coordination.

pub mod adam;
pub mod layer;
pub mod loss;
pub mod matrix;

pub use adam::{adam_step, AdamState};
pub use layer::{Activation, DenseLayer, DenseStack, LayerCache, LayerGrads};
pub use loss::{mse_loss, squared_distance};
pub use matrix::Matrix;
