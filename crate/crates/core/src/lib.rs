//! Energy-based survival models for predictive maintenance, with discrete-time
//! baselines, synthetic data generators and evaluation tools.

// `!(x >= 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod data;
pub mod datagen;
pub mod ebm;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod maintenance;
pub mod model;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
