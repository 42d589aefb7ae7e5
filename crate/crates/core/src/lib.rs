//! Slice-based learning: a backbone network with per-slice residual
//! attention modules (SRAM), the usual comparison baselines, and a harness
//! for the synthetic slice studies.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`, which is what the harness uses.

pub mod baselines;
pub mod datasets;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod numcore;
pub mod scalar;
pub mod slicing;
pub mod sram;
pub mod training;

pub use error::{Error, Result};
pub use nn::{BackboneConfig, Method, Model};
pub use scalar::Scalar;

pub type Tensor = numcore::Tensor2<f64>;
pub type Sram = sram::SramModel<f64>;
pub type Vanilla = baselines::VanillaModel<f64>;
pub type Hps = baselines::HpsModel<f64>;
pub type Moe = baselines::MoeModel<f64>;
pub type AnyModel = models::AnyModel<f64>;
pub type Pretrained = training::Pretrained<f64>;
pub type Trained = training::Trained<f64>;
