//! Correlation-filter tracking with a transformer model predictor, desk scale.
//!
//! The library covers the full loop: synthetic sequence generation, feature
//! extraction, transformer prediction of classifier and box-regressor
//! weights, an optimization-based classifier baseline, online tracking,
//! training, and evaluation metrics.

pub mod checkpoint;
pub mod dataset;
pub mod dcf;
pub mod encoding;
pub mod error;
pub mod geometry;
pub mod graph;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod predictor;
pub mod synth;
pub mod tracker;
pub mod trainlab;

pub use error::{Error, Result};
