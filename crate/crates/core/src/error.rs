use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("exact divergence needs d <= 4 (got d = {0}); use the Hutchinson estimator instead")]
    DimensionTooLarge(usize),

    #[error("{path}: bad magic (expected {expected:?})")]
    BadMagic { path: PathBuf, expected: String },

    #[error("{path}: shape mismatch: file has {found}, expected {expected}")]
    ShapeMismatch { path: PathBuf, found: String, expected: String },

    #[error("{path}: truncated file ({detail})")]
    Truncated { path: PathBuf, detail: String },

    #[error("{path}: malformed header: {detail}")]
    BadHeader { path: PathBuf, detail: String },

    #[error("training diverged at iteration {iteration} (loss = {loss})")]
    Diverged { iteration: usize, loss: f64 },

    #[error("integration produced a non-finite state at step {step}")]
    IntegrationNonFinite { step: usize },

    #[error("adaptive step size underflow at t = {t} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64 },

    #[error("grid too small: {nx}x{ny} (each side must be >= 8)")]
    GridTooSmall { nx: usize, ny: usize },

    #[error("only periodic boundaries are supported")]
    NonPeriodic,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
