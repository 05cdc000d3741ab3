//! Experiment driver for the shrinkage resolvent simulator: TOML configs,
//! seeded multi-trial runs, median/quantile aggregation, CSV and SVG output.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregate;
pub mod cli;
pub mod config;
pub mod emit;
pub mod experiment;

pub use aggregate::{AggregatedSeries, SeriesRow};
pub use config::ExperimentConfig;
pub use experiment::{run_experiment, ExperimentOutput};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(#[from] shrinkage_core::Error),
    #[error("I/O error: {0}")]
    Io(String),
}

impl HarnessError {
    /// 1 for configuration problems, 2 for anything that fails while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Runtime(_) | HarnessError::Io(_) => 2,
        }
    }
}
