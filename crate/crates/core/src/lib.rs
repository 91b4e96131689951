//! Adaptive node sampling for graph transformers: graph storage, sampling
//! heuristics, an adversarial bandit over them, graph coarsening, a
//! hierarchical transformer with hand-written gradients, and the training loop.

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bandit;
pub mod coarsening;
pub mod error;
pub mod graph;
pub mod heuristics;
pub mod model;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
