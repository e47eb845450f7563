//! Unsupervised anomaly detection for sequential boresight thermal images
//! from a laser-sintering process.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: a small reverse-mode autodiff engine (conv, pooling,
//!   batchnorm, dropout, dense) with an Adam optimizer.
//! - [`synth`]: a phenomenological thermal simulator that produces layer
//!   sequences with injected laser-power faults, and the on-disk dataset
//!   format.
//! - [`pipeline`]: normalization, downsampling, snippet construction and
//!   augmentation.
//! - [`model`]: the composite reconstruction + prediction encoder-decoder,
//!   its training loop and weight persistence.
//! - [`scoring`]: per-frame error metrics, snippet errors, anomaly-score
//!   aggregation, detrending, thresholding and ROC/AUC evaluation.

pub mod error;
pub mod model;
pub mod pipeline;
pub mod scoring;
pub mod synth;
pub mod tensor;

pub mod checksum;

pub use error::{Error, Result};
