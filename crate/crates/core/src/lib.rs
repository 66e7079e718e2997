//! Space-time video super-resolution: deformable-attention model, reverse-mode
//! autodiff, training loop, metrics, and synthetic data tooling.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data_io;
pub mod error;
pub mod feat_extract;
pub mod lstfi;
pub mod metrics;
pub mod params;
pub mod reconstruct;
pub mod rng;
pub mod stdfa;
pub mod tensor;
pub mod train;

#[doc(hidden)]
pub mod testutil;

pub use error::{Error, Result};
pub use tensor::Tensor4;
