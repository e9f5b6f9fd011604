//! Dense-prediction laboratory for conditional classifiers.
//!
//! A small fully-convolutional backbone feeds either a global 1×1
//! classifier or a conditional classifier whose kernels are regenerated per
//! input from probability-weighted class centers. Gradients are derived by
//! hand on a reverse-mode tape and checked against central differences.

pub mod autodiff;
pub mod backbone;
pub mod cli;
pub mod error;
pub mod exec;
pub mod head;
pub mod labels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
