//! Forgery-semantics decoupling for generalizable manipulated-image
//! detection.
//!
//! The crate is organized bottom-up:
//!
//! - [`gradcore`]: tensors, reverse-mode tape, parameters, SGD
//! - [`filters`]: the adaptive high-pass filter and multi-scale extraction
//! - [`model`]: encoders, decoders, pixel-attention fusion, detector heads
//! - [`losses`]: classification, reconstruction and contrastive terms
//! - [`corpus`]: synthetic multi-method corpus, manifests, paired loading
//! - [`train`]: the two-stage trainer and checkpoints
//! - [`eval`]: AUC, the intra/held-out protocol, Grad-CAM, reports
//! - `cli`: the `forgesem` command line (feature `cli`)

#[cfg(feature = "cli")]
pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod filters;
pub mod gradcore;
pub mod losses;
pub mod model;
pub mod train;

pub use error::{Error, Result};
