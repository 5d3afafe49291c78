//! Parity learning with and without chain-of-thought on small transformers.

pub mod cli;
pub mod error;
pub mod numerics;
pub mod parity_data;
pub mod simplified_model;
pub mod standard_model;
pub mod metrics_diagnostics;
pub mod theory_construct;
pub mod training_harness;

pub use error::{Error, Result};
