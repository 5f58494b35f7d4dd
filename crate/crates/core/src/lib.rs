//! Decoupled keyframe and motion tokenization of video at desk scale.
//!
//! The pipeline runs: RVID video, fixed-rate clips, block-matching motion,
//! a space-time VQ-VAE motion tokenizer, interleaved token sequences for a
//! toy language model, and a conditional diffusion detokenizer with
//! inversion-chained long-video decoding.

pub mod cli;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod layers;
pub mod lm;
pub mod motion;
pub mod sequence;
pub mod synth;
pub mod training;
pub mod video;
pub mod vqvae;

pub use error::{Error, Result};
