//! Drought-index forecasting with a hybrid quantum-classical network.
//!
//! The crate bundles a small reverse-mode autodiff engine, an exact 3-qubit
//! statevector simulator with parameter-shift gradients, the forecasting
//! model built on both, a gridded-climate data pipeline, and the training
//! and evaluation harness used by the `square-mamba` CLI.

pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod quantum;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
