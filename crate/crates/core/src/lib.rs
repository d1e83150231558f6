//! Grow-then-prune training for small CNN/MLP models.
//!
//! Training starts from a narrow seed network, periodically widens it by
//! splitting its most salient filters/neurons, and finally prunes weights and
//! whole units that the first-order Taylor saliency marks as unimportant.
//! The [`cost`] module turns the resulting structure into FLOPs, parameter,
//! memory-traffic, energy and latency estimates.

pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod export;
pub mod graph;
pub mod nn;
pub mod plasticity;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
