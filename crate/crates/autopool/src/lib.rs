// Validation guards are written `!(x > 0.0)` so NaN fails them; the
// suggested positive comparisons would let NaN through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Adaptive pooling operators for multiple instance learning.
//!
//! A bag of instances (e.g. the frames of an audio clip) carries one weak
//! label per class; the model must still produce per-instance predictions.
//! This crate provides the pooling operators that bridge the two during
//! training — max, mean, soft-max, and the auto-pool family with a learnable
//! per-class sharpness α (plain, weight-capped, and quadratically penalized
//! variants) — together with exact gradients, a small differentiable instance
//! predictor, a joint θ/α training loop with early stopping, static and
//! segment-based evaluation metrics, and a seeded synthetic event-detection
//! data generator.

pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod model;
pub mod objective;
pub mod pooling;
pub mod synthdata;

pub use error::{Error, Result};
