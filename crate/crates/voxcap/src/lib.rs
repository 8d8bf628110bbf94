//! Cross-modal brain-to-text decoding pipeline: synthetic data generation,
//! two-stage alignment and instruction training, caption generation, and
//! reference-based evaluation.

pub mod adaptors;
pub mod blocks;
pub mod cli;
pub mod data;
pub mod decoder;
pub mod domain_adaptation;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod training;
pub mod losses;
pub mod numerics;
pub mod params;
pub mod text;
pub mod tokenizer;

pub use error::{Error, Result};
