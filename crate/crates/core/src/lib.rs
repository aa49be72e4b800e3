//! mvfuse: a two-view image-classification toolkit.
//!
//! The library builds balanced, split, augmented and whitened patch datasets
//! from a manifest of labeled two-view images, pretrains a single-view CNN
//! backbone from scratch, duplicates its frozen feature extractor into a
//! two-branch multi-view model with a late-fusion layer (concatenation or
//! element-wise max), trains the fusion/classifier layers over paired views,
//! and reports per-class precision/recall.
//!
//! The shipped six-class kidney-stone taxonomy (WW, WD, AU, STR, BRU, CYS)
//! is the reference configuration; any class set declared in the manifest
//! works.

pub mod cli;
pub mod data_model;
pub mod error;
pub mod evaluation;
pub mod nets;
pub mod numeric;
pub mod patch_pipeline;
pub mod seed;
pub mod synth;
pub mod training;

pub use error::{Error, Result};

/// Toolkit version stamped into run metadata, checkpoints and reports.
pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");
