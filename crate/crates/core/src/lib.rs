//! Prototype-based masked audio model (PMAM) training for polyphonic sound
//! event detection, at desk scale.

// Negated comparisons deliberately reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod binio;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod finetune;
pub mod mam;
pub mod numgrad;
pub mod pipeline;
pub mod proto;
pub mod rng;
pub mod synthgen;

pub use error::{Error, Result};
