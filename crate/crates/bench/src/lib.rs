//! Benchmark harness for steering methods: synthetic trials, metrics,
//! report generation and the mixture composition experiment.

pub mod config;
pub mod env;
pub mod error;
pub mod gmm_demo;
pub mod metrics;
pub mod pipeline;
pub mod runner;
pub mod trials;

pub use error::{BenchError, Result};
