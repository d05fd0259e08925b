//! CNN-LSTM action recognition from depth sequences, trained with skeleton
//! joints as privileged information that is only available during training.
// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod pipeline;
pub mod recurrent;
pub mod rng;
pub mod skeleton;
pub mod synth;

pub use error::{Error, Result};
