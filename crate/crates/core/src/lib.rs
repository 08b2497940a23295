//! Global pooling operators for sparse-feature image classification.
//!
//! The crate provides outlier pooling (average of activations at or above a
//! per-image, per-channel `mean + lambda * std` threshold), its dynamic
//! variant whose above/below-threshold weighting moves with the training
//! epoch, the usual average and max pooling, and a multi-resolution crop
//! pooling classifier built from hand-written layers. A harness on top runs
//! gradient checks, training runs, the 3x3 crop/pooling ablation grid and
//! convergence comparisons on seeded synthetic data.

pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod nn;
pub mod pooling;
pub mod tensor;

pub use error::{Error, Result};
pub use pooling::{
    cross_crop_backward, cross_crop_pool, pool_backward, pool_forward, schedule_weights,
    PoolContext, PoolMode, Schedule,
};
pub use tensor::{Matrix, Real, Shape4, Tensor4};
