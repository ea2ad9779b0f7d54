//! Experiment driver: configs, stage orchestration and reports on top of
//! `homogenize-core`.

// `!(a >= b)` rejects NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod pipeline;

pub use config::ExperimentConfig;
pub use error::{LabError, Result};
pub use pipeline::{Layout, Pipeline, Stage};
