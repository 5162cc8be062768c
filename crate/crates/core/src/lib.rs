//! Density-map object counting for noisy low-resolution imagery.
//!
//! The crate covers the whole pipeline: annotation ingestion and cropping
//! ([`imagedata`]), a seeded sonar-like generator ([`synthgen`]), Gaussian
//! ground-truth maps ([`densitymap`]), annotation-preserving augmentation
//! ([`augment`]), ranked unlabelled pairs ([`rankpairs`]), a stride-32
//! residual counter with exact gradients ([`network`]), the counting,
//! uncertainty, ranking and balance losses ([`losses`]), Adam training with
//! early stopping and the nine-way ablation ([`trainer`]), and metrics with
//! heat-map rendering ([`evaluation`]).

pub mod augment;
pub mod densitymap;
pub mod error;
pub mod evaluation;
pub mod imagedata;
pub mod losses;
pub mod network;
mod par;
pub mod rankpairs;
pub mod seed;
pub mod synthgen;
pub mod trainer;

#[cfg(feature = "cli")]
pub mod cli;

pub use error::{Error, Result};
