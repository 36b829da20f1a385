//! Step counting as many-to-one sequence regression.
//!
//! An entire variable-length accelerometer recording goes into a stacked LSTM,
//! a sample-by-sample attention layer pools the hidden states, and a small
//! linear head emits a real-valued step count. Around the model sit the
//! preprocessing pipeline, a synthetic gait generator with exact labels,
//! classical time-domain counters, the step-counting metric suite and the
//! cross-validation protocols used to evaluate everything.

pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod export;
pub mod model;
pub mod numkern;
pub mod pipeline;
pub mod train;

pub use error::{Error, Result};
pub use numkern::Matrix;
