//! Detokenizer-side diffusion: schedule, EDM objective, deterministic DDIM
//! sampling and inversion, motion conditioning, and long-video chaining.

pub mod condition;
pub mod ddim;
pub mod detok;
pub mod edm;
pub mod long;
pub mod oracle;
pub mod schedule;
pub mod unet;

pub use condition::{build_condition, ConditionPack};
pub use ddim::{ddim_invert, ddim_sample, Inversion};
pub use long::{decode_long, DecodedClip};
pub use oracle::LinearGaussianOracle;
pub use schedule::{DiffusionSchedule, EdmParams, ScheduleConfig};
pub use unet::{DetokConfig, KeyframeDenoiser, ToyUNet3D};

use crate::error::Result;

/// Predicts the clean sample from `x = x0 + sigma * n` (variance-exploding coordinates).
pub trait Denoiser {
    type Cond;

    fn denoise(&self, x: &[f64], sigma: f64, cond: &Self::Cond) -> Result<Vec<f64>>;
}
