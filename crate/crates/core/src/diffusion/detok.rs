//! Training and evaluating the toy detokenizer on synthetic moving squares.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use motok_tensor::optim::{clip_grad_norm, cosine_lr};
use motok_tensor::{checkpoint, Optimizer, Tape, Tensor};

use crate::diffusion::condition::{build_condition, ConditionPack};
use crate::diffusion::ddim::ddim_sample;
use crate::diffusion::edm::{loss_weight, sample_sigma};
use crate::diffusion::schedule::{DiffusionSchedule, EdmParams};
use crate::diffusion::unet::{denoise_on_tape, prepare, DetokConfig, ToyUNet3D};
use crate::error::{Error, Result};
use crate::motion::{clip_motion, MotionField};
use crate::synth::MovingSquare;
use crate::training::{step_rng, TrainConfig};
use crate::video::{Clip, Frame};

/// Pixel `[0, 255]` to latent `[-1, 1]`.
pub fn to_latent(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

pub fn from_latent(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Luma of `frame` resized to `w x h`, as latent values.
pub fn frame_latent(frame: &Frame, h: usize, w: usize) -> Vec<f32> {
    let l = frame.luma();
    let l = if l.width == w && l.height == h { l } else { l.resize(w, h) };
    l.data.iter().map(|&v| to_latent(v)).collect()
}

pub fn latent_frame(latent: &[f32], h: usize, w: usize) -> Result<Frame> {
    Frame::new(w, h, 1, latent.iter().map(|&v| from_latent(v)).collect())
}

/// One training or evaluation clip: target frames and their condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyClip {
    /// `[T, H, W, C]` latents.
    pub frames: Vec<f32>,
    pub pack: ConditionPack,
    pub field: MotionField,
}

/// Builds a detokenizer clip from decoded frames and a normalized field.
pub fn toy_clip(cfg: &DetokConfig, clip: &Clip, field: &MotionField) -> Result<ToyClip> {
    if cfg.channels != 1 {
        return Err(Error::Config("the toy detokenizer works on luma (1 channel)".into()));
    }
    let key = frame_latent(&clip.keyframe, cfg.h, cfg.w);
    let frames: Vec<f32> = clip.frames.iter().flat_map(|f| frame_latent(f, cfg.h, cfg.w)).collect();
    let pack = build_condition(&key, (cfg.h, cfg.w, 1), field, clip.frames.len())?;
    Ok(ToyClip {
        frames,
        pack,
        field: field.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SquareConfig {
    pub size: usize,
    pub frames: usize,
    pub block: usize,
    pub range: i32,
    pub max_speed: i64,
}

impl Default for SquareConfig {
    fn default() -> Self {
        Self {
            size: 16,
            frames: 4,
            block: 4,
            range: 4,
            max_speed: 2,
        }
    }
}

/// Flat squares moving at constant velocity; `moving_only` excludes the zero velocity.
pub fn square_clips(cfg: &DetokConfig, sq: &SquareConfig, n: usize, moving_only: bool, rng: &mut impl Rng) -> Result<Vec<ToyClip>> {
    let mut out = Vec::with_capacity(n);
    let s = sq.size as i64;
    let steps = sq.frames as i64;
    while out.len() < n {
        let side = rng.random_range(4..=(sq.size / 2).max(4)) as i64;
        let v = (
            rng.random_range(-sq.max_speed..=sq.max_speed),
            rng.random_range(-sq.max_speed..=sq.max_speed),
        );
        if moving_only && v == (0, 0) {
            continue;
        }
        let span = |vel: i64| {
            let lo = (-vel * steps).max(0);
            let hi = s - side - (vel * steps).max(0);
            (lo, hi)
        };
        let ((x0, x1), (y0, y1)) = (span(v.0), span(v.1));
        if x1 < x0 || y1 < y0 {
            continue;
        }
        let start = (rng.random_range(x0..=x1), rng.random_range(y0..=y1));
        let level = rng.random_range(160..=255u8);
        let m = MovingSquare::flat(sq.size, sq.size, side as usize, start, v, level);
        let clip = Clip {
            keyframe: m.frame(0),
            frames: (1..=sq.frames).map(|t| m.frame(t)).collect(),
            clip_fps: 6,
            video_id: "square".into(),
            start_frame: 0,
        };
        let field = clip_motion(&clip, sq.block, sq.range)?.normalize(sq.size, sq.size)?;
        out.push(toy_clip(cfg, &clip, &field)?);
    }
    Ok(out)
}

/// Weighted denoising loss on the tape for one batch; noise drawn from `rng`.
pub fn edm_batch_loss(
    net: &ToyUNet3D,
    edm: &EdmParams,
    tape: &mut Tape,
    clips: &[&ToyClip],
    rng: &mut impl Rng,
) -> Result<motok_tensor::Var> {
    let mut sigmas = Vec::with_capacity(clips.len());
    let mut noisy: Vec<Vec<f64>> = Vec::with_capacity(clips.len());
    let mut weights = Vec::new();
    for c in clips {
        let sigma = sample_sigma(edm, rng);
        noisy.push(
            c.frames
                .iter()
                .map(|&v| {
                    let z: f64 = StandardNormal.sample(rng);
                    v as f64 + sigma * z
                })
                .collect::<Vec<f64>>(),
        );
        weights.extend(std::iter::repeat_n(loss_weight(sigma, edm.sigma_data) as f32, c.frames.len()));
        sigmas.push(sigma);
    }
    let xs: Vec<&[f64]> = noisy.iter().map(|v| v.as_slice()).collect();
    let packs: Vec<&ConditionPack> = clips.iter().map(|c| &c.pack).collect();
    let prep = prepare(&net.cfg, &xs, &sigmas, &packs)?;
    let d = denoise_on_tape(&net.cfg, &net.params, tape, prep)?;
    let shape = tape.shape(d).to_vec();
    let target: Vec<f32> = clips.iter().flat_map(|c| c.frames.iter().copied()).collect();
    let target = tape.constant(Tensor::new(&shape, target)?);
    let diff = tape.sub(d, target)?;
    let sq = tape.mul(diff, diff)?;
    let w = tape.constant(Tensor::new(&shape, weights)?);
    let weighted = tape.mul(sq, w)?;
    Ok(tape.mean(weighted)?)
}

#[derive(Debug, Clone)]
pub struct DetokTrainer {
    pub net: ToyUNet3D,
    pub opt: Optimizer,
    pub tcfg: TrainConfig,
    pub edm: EdmParams,
    pub step: usize,
    /// Mean loss of the first step; later losses above 10x abort training.
    pub initial_loss: Option<f32>,
}

impl DetokTrainer {
    pub fn new(net: ToyUNet3D, edm: EdmParams, tcfg: TrainConfig) -> Self {
        let opt = Optimizer::adamw(tcfg.lr, tcfg.weight_decay);
        Self {
            net,
            opt,
            tcfg,
            edm,
            step: 0,
            initial_loss: None,
        }
    }

    pub fn train_step(&mut self, clips: &[&ToyClip]) -> Result<f32> {
        let mut rng = step_rng(self.tcfg.seed, self.step, 3);
        let mut tape = Tape::new();
        let loss = edm_batch_loss(&self.net, &self.edm, &mut tape, clips, &mut rng)?;
        let lv = tape.value(loss).data()[0];
        let limit = self.initial_loss.map(|l| 10.0 * l);
        if !lv.is_finite() || limit.is_some_and(|l| lv > l) {
            return Err(Error::Diverged(format!(
                "detokenizer loss {lv} at step {} (initial {:?})",
                self.step, self.initial_loss
            )));
        }
        let mut grads = tape.backward(loss)?.params();
        clip_grad_norm(&mut grads, self.tcfg.grad_clip);
        self.opt.lr = cosine_lr(self.step, self.tcfg.steps, self.tcfg.warmup_steps(), self.tcfg.lr);
        self.opt.step(&mut self.net.params, &grads)?;
        self.initial_loss.get_or_insert(lv);
        self.step += 1;
        Ok(lv)
    }

    pub fn step_on(&mut self, data: &[ToyClip]) -> Result<f32> {
        if data.is_empty() {
            return Err(Error::Contract("empty training set".into()));
        }
        let mut rng = step_rng(self.tcfg.seed, self.step, 1);
        let mut idx = sample(&mut rng, data.len(), self.tcfg.batch.min(data.len())).into_vec();
        idx.sort_unstable();
        let batch: Vec<&ToyClip> = idx.iter().map(|&i| &data[i]).collect();
        self.train_step(&batch)
    }

    pub fn run(&mut self, data: &[ToyClip], mut log: impl FnMut(usize, f32)) -> Result<Vec<f32>> {
        let mut curve = Vec::new();
        while self.step < self.tcfg.steps {
            let l = self.step_on(data)?;
            log(self.step - 1, l);
            curve.push(l);
        }
        Ok(curve)
    }

    pub fn to_tensors(&self) -> Result<Vec<(String, Tensor)>> {
        let mut out = self.net.to_tensors()?;
        out.push((
            "meta.train_json".into(),
            checkpoint::text_tensor(&serde_json::to_string(&self.tcfg)?),
        ));
        out.push(("meta.edm_json".into(), checkpoint::text_tensor(&serde_json::to_string(&self.edm)?)));
        out.push(("meta.step".into(), Tensor::new(&[1], vec![self.step as f32])?));
        if let Some(l) = self.initial_loss {
            out.push(("meta.initial_loss".into(), Tensor::new(&[1], vec![l])?));
        }
        out.extend(self.opt.state_tensors("opt"));
        Ok(out)
    }

    pub fn from_tensors(tensors: &[(String, Tensor)]) -> Result<Self> {
        let net = ToyUNet3D::from_tensors(tensors)?;
        let find = |n: &str| tensors.iter().find(|(k, _)| k == n).map(|(_, t)| t);
        let text = |n: &str| find(n).map(checkpoint::tensor_text).transpose();
        let tcfg: TrainConfig = match text("meta.train_json")? {
            Some(s) => serde_json::from_str(&s)?,
            None => TrainConfig::default(),
        };
        let edm: EdmParams = match text("meta.edm_json")? {
            Some(s) => serde_json::from_str(&s)?,
            None => EdmParams::default(),
        };
        let mut t = Self::new(net, edm, tcfg);
        t.step = find("meta.step").map(|t| t.data()[0] as usize).unwrap_or(0);
        t.initial_loss = find("meta.initial_loss").map(|t| t.data()[0]);
        t.opt.load_state("opt", tensors)?;
        Ok(t)
    }
}

/// Full deterministic decode of a clip from seeded noise.
pub fn reconstruct(net: &ToyUNet3D, sched: &DiffusionSchedule, pack: &ConditionPack, rng: &mut impl Rng) -> Result<Vec<f32>> {
    let noise: Vec<f32> = (0..pack.numel()).map(|_| StandardNormal.sample(rng)).collect();
    let out = ddim_sample(net, sched, &noise, pack, sched.num_steps())?;
    Ok(out.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect())
}

/// Peak signal-to-noise ratio in dB for latents in `[-1, 1]` (peak-to-peak 2).
pub fn psnr(a: &[f32], b: &[f32]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (4.0 / mse).log10()
    }
}
