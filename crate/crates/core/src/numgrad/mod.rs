//! Dense arrays, reverse-mode differentiation, and the layers built on them.

mod array;
pub mod check;
mod graph;
pub mod nn;
mod optim;
mod params;

pub use array::Array;
pub use graph::{sigmoid, upsample_linear, Gradients, Graph, Var, COSINE_EPS, LAYER_NORM_EPS, PROB_CLAMP};
pub(crate) use graph::bce_scalar;
pub use optim::{adamw_step, AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore};

/// Default leaky-ReLU negative slope.
pub const LEAKY_SLOPE: f64 = 0.01;
