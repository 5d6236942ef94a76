//! Piecewise exponential additive models (PAMs) for right-censored survival
//! data, and their extension with a point-cloud encoder whose latent features
//! enter the log-hazard additively.
//!
//! The numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the scalar to `f64`, which is what the experiment harness uses.

pub mod basis;
pub mod deepnet;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod pam;
pub mod ped;
mod scalar;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type SurvivalRecord64 = ped::SurvivalRecord<f64>;
pub type PedData64 = ped::PedData<f64>;
pub type CutPoints64 = ped::CutPoints<f64>;
pub type SplineSpec64 = basis::SplineSpec<f64>;
pub type PamFit64 = pam::PamFit<f64>;
pub type PamFit32 = pam::PamFit<f32>;
pub type StepFunction64 = eval::StepFunction<f64>;
pub type DeepPamModel64 = deepnet::DeepPamModel<f64>;
pub type DeepPamModel32 = deepnet::DeepPamModel<f32>;
