//! Experiment runner for the `eos-core` library: presets for the four step
//! size regimes, parallel initialisations, CSV/JSON/SVG output and numerical
//! self-checks.

// `!(x > 0.0)` is used deliberately so that NaN takes the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checks;
pub mod cli;
pub mod config;
mod error;
pub mod experiment;
pub mod output;

pub use error::{LabError, LabResult};
