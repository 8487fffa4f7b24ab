//! Experiment harness for the probability-space safety filter: TOML configs,
//! ensemble runs, comparison statistics and CSV/SVG output.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod experiment;
pub mod oracles;
pub mod output;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
pub use experiment::{compare_controllers, run_experiment, Comparison, ExperimentReport};
pub use output::write_outputs;
