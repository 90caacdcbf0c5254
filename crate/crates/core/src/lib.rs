//! Desk-scale laboratory for progressive expert-pool expansion in
//! mixture-of-experts language models.
//!
//! The crate is organized around a small f64 numerics core with
//! finite-difference-checked gradients, a GQA transformer with sigmoid-routed
//! MoE layers, expansion operators that grow the expert pool mid-run, a joint
//! sparsity scaling law with a robust fitter, a compute-optimal token
//! allocator, and the trainer/datagen/metrics plumbing needed to run and
//! compare full desk-scale experiments deterministically.

pub mod allocation;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod expansion;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod scaling_law;
pub mod trainer;

pub use error::{Error, Result};
