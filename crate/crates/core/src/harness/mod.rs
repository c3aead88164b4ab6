//! Dataset generation, evaluation and the benchmark matrix.

pub mod benchmark;
pub mod data;
pub mod metrics;
