//! Two-scale high-frequency residual networks: a low-resolution branch
//! whose stage features are upsampled into a high-resolution branch, with
//! joint training, confidence-gated early exit, MAC accounting and
//! feature-map spectrum analysis.

pub mod autodiff;
pub mod calibration;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod flops;
pub mod freq;
pub mod layers;
pub mod net;
pub mod tensor;
pub mod train;
pub mod util;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
