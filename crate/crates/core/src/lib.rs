//! A sequential recommender trained jointly with a learned behavior sampler.
//!
//! The sampler reads a user's interaction history and decides, per step,
//! whether to keep the interaction. The recommender trains on the kept
//! subsequence. The sampler is trained with policy gradients against two
//! rewards: how well the kept history predicts the future, and how coherent
//! each item is with its context under the recommender.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod numerics;
pub mod rewards;
pub mod rng;
pub mod sampler;
pub mod srs;
pub mod training;

pub use error::{Error, Result};
