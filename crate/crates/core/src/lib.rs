//! Equilibrium contrastive learning for imbalanced classification.
//!
//! The crate bundles a small reverse-mode tensor engine ([`diff`]), the
//! contrastive/alignment/compensation losses ([`losses`]), a three-branch
//! MLP model ([`model`]), geometry metrics ([`metrics`]), a synthetic
//! long-tailed data generator ([`data`]) and the training loop ([`trainer`]).

pub mod data;
pub mod diff;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
