//! Cross-domain feature importance (FiDo) for non-intrusive speech
//! intelligibility prediction, with the MBI-Net+ assessment model.
//!
//! All numeric code is generic over [`Scalar`] (`f32` for training and
//! inference, `f64` for gradient checking); the aliases below fix the
//! common instantiations.

pub mod assessment;
pub mod config;
pub mod dataset;
pub mod dsp;
pub mod error;
pub mod fido;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod provider;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub use model::{Model32, Model64};
