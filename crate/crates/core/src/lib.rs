//! Sharpness-aware training of self-attentive sequential recommenders.
//!
//! The crate bundles the full experimental loop: interaction-log
//! preprocessing, a causal transformer recommender with its own
//! reverse-mode differentiation engine, sequence augmentations with a
//! contrastive objective, the two-step sharpness-aware update, loss
//! landscape probing, and leave-one-out ranking evaluation.

pub mod augment;
pub mod autodiff;
pub mod cli;
mod codec;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod landscape;
pub mod model;
pub mod rng;
pub mod sam;

pub use error::{Error, Result};
