//! Command-line surface over the `rvseg-core` engine: dataset generation,
//! training, evaluation, projection dumps, checkpoint inspection, and the
//! ablation harness.
//!
//! Commands live here as library functions so tests can drive them
//! directly; `main` only parses arguments and maps errors to exit codes.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod pipeline;
