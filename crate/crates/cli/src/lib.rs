//! Run orchestration for the two-stage adaptation pipeline: configuration,
//! dataset splitting, resumable stages, the loss ablation and the
//! description-source comparison.

pub mod ablation;
pub mod compare;
pub mod config;
pub mod pipeline;
pub mod split;
