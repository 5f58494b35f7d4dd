//! One JSON document holding every pipeline hyperparameter.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{DetokConfig, ScheduleConfig};
use crate::error::{Error, Result};
use crate::lm::LmConfig;
use crate::sequence::{KeyframeConfig, UnifiedVocab};
use crate::training::TrainConfig;
use crate::vqvae::{Axes, Downsample, VqvaeConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoConfig {
    pub clip_fps: u32,
    pub clip_len: usize,
    pub block: usize,
    pub search: i32,
    /// Motion grid the tokenizer consumes.
    pub grid_h: usize,
    pub grid_w: usize,
}

impl Default for VideoConfig {
    fn default() -> Self {
        Self {
            clip_fps: 6,
            clip_len: 24,
            block: 16,
            search: 8,
            grid_h: 20,
            grid_w: 36,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmArch {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub context: usize,
    pub ffn_mult: usize,
    pub dropout: f32,
}

impl Default for LmArch {
    fn default() -> Self {
        let d = LmConfig::default();
        Self {
            layers: d.layers,
            dim: d.dim,
            heads: d.heads,
            context: d.context,
            ffn_mult: d.ffn_mult,
            dropout: d.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub tokenizer: TrainConfig,
    pub detok: TrainConfig,
    pub lm: TrainConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            tokenizer: TrainConfig::default(),
            detok: TrainConfig {
                batch: 8,
                lr: 2e-3,
                ..TrainConfig::default()
            },
            lm: TrainConfig {
                lr: 3e-4,
                weight_decay: 0.1,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoints {
    pub tokenizer: PathBuf,
    pub keyframe: PathBuf,
    pub detok: PathBuf,
    pub lm: PathBuf,
}

impl Default for Checkpoints {
    fn default() -> Self {
        Self {
            tokenizer: "checkpoints/tokenizer.mtok".into(),
            keyframe: "checkpoints/keyframe.mtok".into(),
            detok: "checkpoints/detok.mtok".into(),
            lm: "checkpoints/lm.mtok".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub video: VideoConfig,
    pub tokenizer: VqvaeConfig,
    /// Motion tokens per clip; must equal what the downsample schedule produces.
    pub motion_tokens: usize,
    pub keyframe: KeyframeConfig,
    pub vocab: UnifiedVocab,
    pub lm: LmArch,
    pub schedule: ScheduleConfig,
    pub detok: DetokConfig,
    pub train: TrainSettings,
    pub checkpoints: Checkpoints,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            video: VideoConfig::default(),
            tokenizer: VqvaeConfig::default(),
            motion_tokens: 135,
            keyframe: KeyframeConfig::default(),
            vocab: UnifiedVocab::default(),
            lm: LmArch::default(),
            schedule: ScheduleConfig::default(),
            detok: DetokConfig::default(),
            train: TrainSettings::default(),
            checkpoints: Checkpoints::default(),
        }
    }
}

impl PipelineConfig {
    /// Small everything: 8-frame clips on an 8x8 motion grid, 16 motion and 16
    /// keyframe tokens per clip, tiny models and short schedules.
    pub fn desk() -> Self {
        let tokenizer = VqvaeConfig {
            t: 8,
            h: 8,
            w: 8,
            d_model: 32,
            heads: 4,
            ffn_mult: 2,
            blocks: 2,
            downsample: vec![
                Downsample {
                    after_block: 1,
                    axes: Axes::S,
                },
                Downsample {
                    after_block: 2,
                    axes: Axes::ST,
                },
            ],
            d_code: 8,
            codebook_size: 128,
            decay: 0.995,
            beta: 0.25,
            dead_code_steps: 50,
            seed: 0,
        };
        let small = |steps| TrainConfig {
            steps,
            batch: 4,
            lr: 2e-3,
            ..TrainConfig::default()
        };
        Self {
            video: VideoConfig {
                clip_fps: 6,
                clip_len: 8,
                block: 16,
                search: 8,
                grid_h: 8,
                grid_w: 8,
            },
            tokenizer,
            motion_tokens: 16,
            keyframe: KeyframeConfig {
                image_size: 56,
                patch_size: 14,
                kmeans_iters: 5,
            },
            vocab: UnifiedVocab {
                text_size: 256,
                visual_size: 32,
                motion_size: 128,
            },
            lm: LmArch {
                layers: 1,
                dim: 32,
                heads: 2,
                context: 128,
                ffn_mult: 2,
                dropout: 0.0,
            },
            schedule: ScheduleConfig {
                num_steps: 20,
                ..ScheduleConfig::default()
            },
            detok: DetokConfig {
                width: 16,
                heads: 2,
                ..DetokConfig::default()
            },
            train: TrainSettings {
                tokenizer: small(20),
                detok: small(20),
                lm: small(20),
            },
            ..Self::default()
        }
    }

    pub fn lm_config(&self) -> LmConfig {
        LmConfig {
            vocab: self.vocab,
            layers: self.lm.layers,
            dim: self.lm.dim,
            heads: self.lm.heads,
            context: self.lm.context,
            ffn_mult: self.lm.ffn_mult,
            dropout: self.lm.dropout,
            seed: self.seed,
        }
    }

    /// Length of a sequence holding one clip and no text.
    pub fn one_clip_len(&self) -> usize {
        1 + (2 + self.keyframe.num_tokens()) + (2 + self.motion_tokens) + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema version {} is not the supported {SCHEMA_VERSION}",
                self.schema_version
            ));
        }
        let v = &self.video;
        if v.clip_fps == 0 || v.clip_len == 0 || v.block == 0 || v.search < 0 {
            return bad("video settings must be positive".into());
        }
        self.tokenizer.validate()?;
        let t = &self.tokenizer;
        if (t.t, t.h, t.w) != (v.clip_len, v.grid_h, v.grid_w) {
            return bad(format!(
                "tokenizer input ({}, {}, {}) differs from clip length and motion grid ({}, {}, {})",
                t.t, t.h, t.w, v.clip_len, v.grid_h, v.grid_w
            ));
        }
        let n = t.num_tokens()?;
        if n != self.motion_tokens {
            return bad(format!(
                "downsample schedule yields {n} motion tokens but motion_tokens is {}",
                self.motion_tokens
            ));
        }
        self.vocab.validate()?;
        if self.vocab.motion_size as usize != t.codebook_size {
            return bad(format!(
                "motion vocabulary {} differs from codebook size {}",
                self.vocab.motion_size, t.codebook_size
            ));
        }
        self.keyframe.validate()?;
        self.lm_config().validate()?;
        if self.lm.context < self.one_clip_len() {
            return bad(format!(
                "LM context {} cannot hold one clip ({} tokens)",
                self.lm.context,
                self.one_clip_len()
            ));
        }
        self.schedule.build()?;
        self.detok.validate()?;
        if self.detok.sigma_data != self.schedule.edm.sigma_data {
            return bad("detok.sigma_data must equal schedule.edm.sigma_data".into());
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Loads and validates; relative checkpoint paths are taken from the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Self::from_json(&std::fs::read_to_string(path)?)?;
        if let Some(dir) = path.parent() {
            c.checkpoints.resolve(dir);
        }
        Ok(c)
    }
}

impl Checkpoints {
    pub fn resolve(&mut self, base: &Path) {
        for p in [&mut self.tokenizer, &mut self.keyframe, &mut self.detok, &mut self.lm] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_consistent() {
        PipelineConfig::default().validate().unwrap();
        PipelineConfig::desk().validate().unwrap();
    }

    #[test]
    fn token_mismatch_rejected() {
        let c = PipelineConfig {
            motion_tokens: 256,
            ..PipelineConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn json_round_trip() {
        let c = PipelineConfig::desk();
        assert_eq!(PipelineConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
    }
}
