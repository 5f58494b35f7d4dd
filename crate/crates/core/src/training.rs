//! Settings and reproducible randomness shared by every training loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub warmup_frac: f32,
    pub weight_decay: f32,
    pub grad_clip: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 8,
            lr: 1e-3,
            warmup_frac: 0.06,
            weight_decay: 0.001,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn warmup_steps(&self) -> usize {
        ((self.steps as f32 * self.warmup_frac).round() as usize).max(1)
    }
}

/// Per-step RNG so that any step can be replayed from a checkpoint.
pub fn step_rng(seed: u64, step: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(step as u128 * 1024);
    rng
}

