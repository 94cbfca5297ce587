//! Continual language adaptation lab.
//!
//! A from-scratch toy encoder-decoder transcriber over synthetic languages,
//! four ways to add a new language to it (full fine-tuning, LoRA, soft
//! language-code tuning, soft prompt tuning), EWC regularization with a
//! diagonal Fisher estimate, and Fisher-overlap analysis.

pub mod adapters;
pub mod autodiff;
pub mod checkpoint;
pub mod continual;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use params::ParamStore;
pub use tensor::Tensor;
