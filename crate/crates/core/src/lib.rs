//! Post-hoc out-of-distribution scoring over dumped network artifacts.
//!
//! The crate reads per-sample activation dumps (pre-pooling feature maps,
//! logits, pooled features, classifier head) and computes activation-prior
//! scores, the usual logit/feature baselines, their weighted geometric
//! combination, and the ROC metrics used to evaluate them. A seeded
//! synthetic generator produces fixtures so everything runs without a model.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod baselines;
pub mod cli;
pub mod combine;
pub mod csv_io;
mod error;
pub mod metrics;
pub mod scoring;
pub mod synth;
pub mod tensor_io;
pub mod tuning;

pub use error::{Error, Result};
