//! Desk-scale laboratory for concept erasure and reactivation on a miniature
//! rectified-flow dual-stream transformer.
//!
//! The crate trains a toy text-to-image flow model on a synthetic concept
//! dataset, produces "victim" models whose target-token attention has been
//! suppressed, mounts low-rank reactivation attacks against them, and ships
//! the diagnostic mathematics (softmax Jacobians, attention heatmaps,
//! layer-wise attack gains) plus an evaluation harness with pluggable
//! classifiers. Everything is CPU-only, double precision, and seeded.

pub mod analysis;
pub mod attack;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod erasure;
pub mod error;
pub mod evalharness;
pub mod lora;
pub mod manifest;
pub mod miniflux;
pub mod numdiff;
pub mod optim;
pub mod rng;
pub mod trainbase;

pub use error::{Error, Result};
