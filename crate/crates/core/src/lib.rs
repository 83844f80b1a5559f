//! Aircraft noise event classification.
//!
//! Events from noise monitors are ingested as third-octave spectrograms,
//! resampled to a fixed matrix, and classified as aircraft or community
//! noise by a small convolutional network. Uncertain predictions are queued
//! for manual labeling and the model is retrained on the grown label set.

mod error;
mod seed;

pub mod active;
pub mod event;
pub mod ingest;
pub mod jsonl;
pub mod nn;
pub mod preprocess;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use seed::derive_seed;
