//! Gumbel-based rating prediction.
//!
//! Per-user and per-item score features are read off learned minimum-Gumbel
//! densities, fused with a backbone's interaction features by a multi-scale
//! convolution, and turned into a rating by a head weighted with the
//! historical rating ratios. Everything is differentiated by the small tape
//! in [`compute`] and checked against finite differences in the tests.

pub mod backbones;
pub mod compute;
pub mod data;
pub mod distributions;
pub mod error;
pub mod experiment;
pub mod features;
pub mod grp;
pub mod params;
pub mod report;
pub mod tensor;
pub mod training;

pub use error::{GrpError, Result};
pub use tensor::Tensor;
