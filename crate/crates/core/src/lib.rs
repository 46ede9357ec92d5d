//! Feature whitening and balanced batch sampling for imbalanced classification.
//!
//! The pipeline inserts ZCA channel whitening in front of a linear classifier
//! and stabilises the mini-batch covariance it depends on with a group-based
//! relatively balanced batch sampler (GRBS) whose batches are embedded into
//! the ordinary random-sampler stream (BET).
//!
//! Module map:
//! - [`whitening`]: differentiable ZCA whitening with running statistics.
//! - [`diagnostics`]: channel correlation, singular spectra and the
//!   covariance stability metric, plus the JSON-lines report stream.
//! - [`sampler`]: GRBS planning and batch generation, random and
//!   class-balanced baselines.
//! - [`dataset`]: synthetic long-tailed data and a CSV loader.
//! - [`nn`] / [`train`]: dense backbone, SGD and the interleaved training loop.
//! - [`config`] / [`cli`]: the experiment runner.

pub mod batch;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod sampler;
pub mod train;
pub mod whitening;

pub use batch::FeatureBatch;
pub use error::{Error, Result};
