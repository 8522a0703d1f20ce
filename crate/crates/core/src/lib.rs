//! Training, curation and evaluation toolkit for detectors trained on
//! heterogeneous multi-source deepfake data.
//!
//! The crate is organised by subsystem:
//!
//! - [`tensor`]: dense math, a small MLP binary classifier with analytic
//!   gradients, cross-entropy and an adaptive-moment optimizer.
//! - [`boosting`]: vanilla, distillation, difficulty-weighted and
//!   momentum-difficulty-boosted training.
//! - [`datasets`]: line-delimited manifests, merging, stratified splits and
//!   synthetic Gaussian mixtures.
//! - [`curation`]: the coarse-to-fine filtering pipeline (score filters,
//!   Canny/colour style filter, word filter, manual review, face crops).
//! - [`metrics`]: AUC, EER and accuracy.
//! - [`spectra`]: high-pass filtering and averaged log-magnitude spectra.
//! - [`experiment`]: multi-strategy and scale-factor sweep harness.
//! - [`review`]: decision log and state for the manual review stage.
//!
//! Independent batch work (sweep runs, per-image transforms, per-record
//! filters) goes through [`par::Execution`], which uses rayon when the
//! `parallel` feature is enabled and falls back to plain iteration otherwise.

pub mod boosting;
pub mod curation;
pub mod datasets;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod par;
pub mod review;
pub mod spectra;
pub mod tensor;

pub use error::{Error, Result};
