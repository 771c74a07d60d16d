//! Rectified-flow training, reflow and divergence-aware sampling for planar
//! benchmarks.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod benchmarks;
pub mod coupling;
mod error;
pub mod helmholtz;
pub mod integrators;
pub mod mechanism;
pub mod metrics;
pub mod model;
pub mod ndcore;
pub mod training;

pub use error::{Error, Result};
