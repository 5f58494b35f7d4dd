//! Motion tokenizer: space-time transformer encoder, EMA codebook, mirrored decoder.

pub mod codebook;
pub mod model;
pub mod train;

pub use codebook::{codebook_usage, Codebook, Metric, Usage};
pub use model::{Axes, Downsample, MotionVqvae, VqvaeConfig};
pub use train::{StepStats, VqvaeTrainer};
pub use crate::training::TrainConfig;
