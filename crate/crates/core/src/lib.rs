//! Label-free adaptation of a frozen vision-language model to a new
//! classification task.
//!
//! A linear adapter is first trained on LLM-written class descriptions
//! embedded by the text tower ([`adapter`]), then tuned together with a
//! learnable visual prompt on unlabeled images by a weak/strong
//! pseudo-labeling objective ([`unsup`]).
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used by the pipeline.

pub mod adapter;
pub mod corpus;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod optim;
mod scalar;
pub mod synth;
pub mod unsup;

pub use error::{Error, ErrorClass, Result};
pub use scalar::Scalar;

pub type AdapterF32 = adapter::Adapter<f32>;
pub type AdapterF64 = adapter::Adapter<f64>;
pub type PromptF32 = unsup::PromptVector<f32>;
pub type PromptF64 = unsup::PromptVector<f64>;
