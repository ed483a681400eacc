//! Sparse control-point trajectory prediction for team sports.
//!
//! Models emit a position every `stride` steps and a closed-form
//! constant-Nth-derivative interpolant fills in the steps between, so the
//! training loss and every metric are computed on dense trajectories.

pub mod dataio;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod motion;
pub mod sweep;
pub mod training;

pub use error::{Error, Result};
