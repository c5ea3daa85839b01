//! Shadow removal with a mask-augmented patch embedding.
//!
//! The crate covers the physical shadow model, the embedding itself, a small
//! transformer restoration network with its own reverse-mode core, metrics,
//! mask degradation, a synthetic dataset generator and the experiment harness.

pub mod cli;
pub mod dataset;
pub mod degrade;
pub mod error;
pub mod harness;
pub mod imaging;
pub mod mape;
pub mod metrics;
pub mod nn;
pub mod shadow_model;
pub mod synth;

pub use error::{Error, Result};
pub use imaging::{FloatImage, RangeTag, RawMask};
pub use mape::{EmbeddingVariant, MapeConfig};
