//! Trajectory tokenization, masked dual-channel pretraining and DTW-grounded
//! retrieval evaluation.

pub mod encoder;
pub mod error;
pub mod exec;
pub mod geo;
pub mod grid;
pub mod masking;
pub mod pipeline;
pub mod rng;
pub mod similarity;
pub mod synth;
pub mod tokenizer;
pub mod vocab;

pub use error::{Error, Result};
