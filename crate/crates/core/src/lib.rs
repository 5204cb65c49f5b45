//! LaSyn: latent-syntax neural machine translation.
//!
//! The decoder predicts, at every target position, a distribution over
//! latent tags and, for each tag value, a distribution over target words.
//! Word probabilities are marginalized over tags exactly at each step, and
//! training runs a neural EM loop whose posteriors can be pulled towards
//! gold tag sequences.

pub mod corpus;
pub mod decoder;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{LasynError, Result};
