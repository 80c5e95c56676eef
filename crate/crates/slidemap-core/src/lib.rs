//! Landslide density estimation from elevation and SAR rasters with weak
//! point labels (landslide heads).
//!
//! The pipeline has two stages: a small convolutional network trained with a
//! batch-level set loss produces a per-pixel embedding mask for each chip, and
//! a random forest over percentile features of that mask predicts one of three
//! density classes (none, 1–25 heads/km², >25 heads/km²). A deterministic
//! synthetic scene generator provides desk-scale end-to-end verification.
//!
//! With the `parallel` feature (on by default) the row-, chip-, sample- and
//! tree-level inner loops run on rayon; without it everything runs
//! sequentially with identical results.

pub mod chipping;
pub mod convnet;
pub mod error;
pub mod eval;
pub(crate) mod exec;
pub mod features;
pub mod forest;
pub mod loss;
pub mod pipeline;
pub mod raster;
pub mod synth;
pub mod tensor;
pub mod terrain;
pub mod training;

pub use error::{Error, Result};
