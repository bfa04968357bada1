//! Adaptive diffusion purification on a closed-form testbed.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod calibrate;
pub mod certify;
pub mod embed;
pub mod error;
pub mod harness;
pub mod purify;
pub mod rng;
pub mod schedule;
pub mod sde;
pub mod theory;

pub use error::{Error, Result};
