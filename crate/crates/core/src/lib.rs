//! Perceptual usability engine for interface icon sets.
//!
//! The crate covers the offline pipeline (dataset curation, rating QA,
//! joint image/tag embedding, usability prediction) and the scoring
//! primitives used by the interactive feedback service.

pub mod curation;
pub mod distinguishability;
pub mod embedding;
pub mod error;
pub mod icon;
pub mod learncore;
pub mod par;
pub mod predictor;
pub mod ratings;
pub mod syngen;

pub use error::{Error, Result};
pub use icon::{EditSuggestion, GrayscaleImage, Stroke, VectorIcon};
