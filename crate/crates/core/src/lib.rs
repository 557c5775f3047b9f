//! Local-linearity regularization for single-step adversarial training.
//!
//! A small define-by-run autodiff engine with double backprop, MLP
//! classifiers, FGSM/PGD/N-FGSM attacks, curvature regularizers, probes
//! and a deterministic training loop.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod models;
pub mod probes;
pub mod regularizers;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, LeafKind, Var};
pub use tensor::Tensor;
