//! Test-time adaptation on a small differentiable encoder/classifier.
//!
//! * [`autodiff`]: dense tensors on a reverse-mode tape.
//! * [`model`]: `Linear → LayerNorm → ReLU → Dropout` encoder with an affine head.
//! * [`datagen`]: Gaussian-cluster source tasks, covariate shifts and test streams.
//! * [`tta`]: Direct, Tent, EATA-lite, OIL-lite and perturbation-consistency adaptation.
//! * [`metrics`]: accuracy, error transitions, throughput and multi-seed aggregation.
//!
//! The crate is `no_std` and needs only `alloc`.

#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod datagen;
mod error;
mod float_serde;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod tta;

pub use error::{Error, Result};
pub use tensor::Tensor;
