//! Dynamic convolution: instead of one kernel per layer, hold K parallel
//! kernels and blend them per sample with input-conditioned attention weights
//! before convolving. The blend is a convex combination, so the layer costs
//! barely more than a static convolution while being far more expressive.
//!
//! The crate provides:
//!
//! - a dense tensor with a reverse-mode autodiff tape ([`tensor`], [`tape`],
//!   [`ops`]),
//! - the dynamic layer itself: attention branch, kernel aggregation, and the
//!   evaluation-time aggregation variants used to probe whether a trained
//!   model is genuinely input-dependent ([`nn`]),
//! - an analytic Mult-Adds cost model with a MobileNetV2 generator
//!   ([`cost`]) plus an instrumented multiply-accumulate tally ([`count`])
//!   that cross-checks the model against executed arithmetic,
//! - a small training harness with SGD + momentum, cosine/step learning-rate
//!   schedules and a temperature schedule for the attention softmax
//!   ([`train`], [`data`]),
//! - inspection routines: aggregation-mode ablations, per-stage attention
//!   masking, attention statistics ([`inspect`]).

pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod count;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod inspect;
pub mod model;
pub mod nn;
pub mod ops;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::Tape;
pub use tensor::{Dtype, Element, Tensor};
