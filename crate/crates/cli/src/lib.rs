//! Experiment driver: configuration, pipeline stages and artifact layout.
pub mod config;
pub mod pipeline;
