//! Downscaling of coarse brightness-temperature grids.
//!
//! Fine-scale auxiliary fields are grouped with an entropy-regularized
//! Cauchy–Schwarz fuzzy clustering, one kernel ridge model is trained per
//! cluster on a sparse set of fine observations, and the models are fused
//! with the soft memberships of every pixel.

pub mod cli;
pub mod clustering;
pub mod error;
pub mod evaluation;
pub mod grid;
pub mod pipeline;
pub mod regression;
pub mod scene;

pub use error::{Error, Result};
