//! Synthetic labeled training data for document segmentation.
//!
//! The pipeline clusters the per-pixel features of a generator's
//! intermediate layers, lets an annotator map clusters to classes, fuses the
//! cluster maps into label images, synthesizes a balanced dataset, trains a
//! per-pixel segmenter on it and evaluates it on full documents.

pub mod augment;
pub mod catalog;
pub mod clustering;
pub mod components;
pub mod datasynth;
pub mod docgen;
pub mod error;
pub mod fusion;
pub mod gridsearch;
pub mod image;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod segmenter;

pub use error::{Error, Result};
pub use image::{Class, ConfidenceMap, LabelImage, Raster, RgbRaster};
pub use rng::GenSeed;
