use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use motok_tensor::nn::{self, ParamStore};
use motok_tensor::{checkpoint, Tape, Tensor, Var};

use crate::diffusion::condition::ConditionPack;
use crate::diffusion::edm::precond;
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::layers::{init_st_block, st_block};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetokConfig {
    /// Latent height and width; both even.
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub width: usize,
    pub heads: usize,
    pub cond_blocks: usize,
    pub sigma_data: f64,
    pub seed: u64,
}

impl Default for DetokConfig {
    fn default() -> Self {
        Self {
            h: 16,
            w: 16,
            channels: 1,
            width: 32,
            heads: 4,
            cond_blocks: 1,
            sigma_data: 0.5,
            seed: 0,
        }
    }
}

impl DetokConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 || !self.h.is_multiple_of(2) || !self.w.is_multiple_of(2) {
            return Err(Error::Config(format!("latent grid {}x{} must be even and nonempty", self.h, self.w)));
        }
        if self.channels == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("{} heads do not divide width {}", self.heads, self.width)));
        }
        if self.sigma_data.is_nan() || self.sigma_data <= 0.0 {
            return Err(Error::Config("sigma_data must be positive".into()));
        }
        Ok(())
    }

    pub fn frame_len(&self) -> usize {
        self.h * self.w * self.channels
    }
}

const NOISE_FEATURES: usize = 9;

fn noise_features(c_noise: f64) -> [f32; NOISE_FEATURES] {
    let mut f = [0.0f32; NOISE_FEATURES];
    f[0] = c_noise as f32;
    for (i, k) in [1.0, 2.0, 4.0, 8.0].iter().enumerate() {
        f[1 + 2 * i] = (c_noise * k).sin() as f32;
        f[2 + 2 * i] = (c_noise * k).cos() as f32;
    }
    f
}

/// Fixed sinusoidal frame-index code `[T, 1, 1, D]`, valid for any clip length.
fn temporal_code(t: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(t * d);
    for ti in 0..t {
        for i in 0..d {
            let freq = 1.0 / 100f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = ti as f64 * freq;
            data.push(if i % 2 == 0 { a.sin() } else { a.cos() } as f32 * 0.1);
        }
    }
    Tensor::new(&[t, 1, 1, d], data).unwrap()
}

pub fn init_params(cfg: &DetokConfig) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w, c) = (cfg.width, cfg.channels);
    let mut s = ParamStore::new();
    s.init_linear("in", 9 * (2 * c + 2), w, &mut rng);
    s.init_linear("emb.fc1", NOISE_FEATURES, w, &mut rng);
    s.init_linear("emb.fc2", w, w, &mut rng);
    s.init_linear("c1", 9 * w, w, &mut rng);
    s.init_layer_norm("mid.ln_t", w);
    s.init_attention("mid.attn_t", w, w, &mut rng);
    s.init_layer_norm("mid.ln_xs", w);
    s.init_attention("mid.cross_s", w, w, &mut rng);
    s.init_layer_norm("mid.ln_xt", w);
    s.init_attention("mid.cross_t", w, w, &mut rng);
    s.init_layer_norm("mid.ln_f", w);
    s.init_ffn("mid.ffn", w, 2, &mut rng);
    s.init_linear("mix", 2 * w, w, &mut rng);
    s.init_linear("out", 9 * w, c, &mut rng);
    s.init_linear("cond.in", 2, w, &mut rng);
    s.insert("cond.pos_s", nn::normal(&[cfg.h / 2, cfg.w / 2, w], 0.02, &mut rng));
    for b in 0..cfg.cond_blocks {
        init_st_block(&mut s, &format!("cond.b{b}"), w, 2, &mut rng);
    }
    s
}

/// 3x3 zero-padded spatial convolution per frame of `[B, T, H, W, C]`.
fn conv3(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let flat = tape.reshape(x, &[s[0] * s[1], s[2], s[3], s[4]])?;
    let u = tape.unfold(flat, 3)?;
    let y = nn::linear(tape, store, name, u)?;
    let d = *tape.shape(y).last().unwrap();
    Ok(tape.reshape(y, &[s[0], s[1], s[2], s[3], d])?)
}

/// `[B, T, H, W, D] -> [B*H*W, T, D]`
fn to_time(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let p = tape.permute(x, &[0, 2, 3, 1, 4])?;
    Ok(tape.reshape(p, &[s[0] * s[2] * s[3], s[1], s[4]])?)
}

fn from_time(tape: &mut Tape, x: Var, s: &[usize]) -> Result<Var> {
    let r = tape.reshape(x, &[s[0], s[2], s[3], s[1], s[4]])?;
    Ok(tape.permute(r, &[0, 3, 1, 2, 4])?)
}

/// Raw network `F` on the tape.
///
/// `input` is `[B, T, H, W, 2C+2]` with the noisy channels already scaled by
/// `c_in`, `motion` is `[B, T, H, W, 2]` and `noise` is `[B, 1, 1, 1, 9]`.
pub fn forward(cfg: &DetokConfig, store: &ParamStore, tape: &mut Tape, input: Tensor, motion: Tensor, noise: Tensor) -> Result<Var> {
    let is = input.shape().to_vec();
    if is.len() != 5 || is[2] != cfg.h || is[3] != cfg.w || is[4] != 2 * cfg.channels + 2 {
        return Err(Error::Shape(format!(
            "denoiser expects [B, T, {}, {}, {}], got {is:?}",
            cfg.h,
            cfg.w,
            2 * cfg.channels + 2
        )));
    }
    let (b, t) = (is[0], is[1]);
    let tcode = tape.constant(temporal_code(t, cfg.width));

    let x = tape.constant(input);
    let mut h = conv3(tape, store, "in", x)?;
    let nf = tape.constant(noise);
    let e = nn::linear(tape, store, "emb.fc1", nf)?;
    let e = tape.gelu(e)?;
    let e = nn::linear(tape, store, "emb.fc2", e)?;
    h = tape.add_broadcast(h, e)?;
    h = tape.gelu(h)?;
    h = conv3(tape, store, "c1", h)?;
    let skip = tape.gelu(h)?;

    // motion features from the conditioning encoder, at the low-resolution grid
    let m = tape.constant(motion);
    let m = tape.avg_pool(m, [1, 2, 2])?;
    let mut f = nn::linear(tape, store, "cond.in", m)?;
    f = tape.add_broadcast(f, tcode)?;
    let ps = nn::param(tape, store, "cond.pos_s")?;
    f = tape.add_broadcast(f, ps)?;
    for i in 0..cfg.cond_blocks {
        f = st_block(tape, store, &format!("cond.b{i}"), f, cfg.heads)?;
    }

    let mut l = tape.avg_pool(skip, [1, 2, 2])?;
    let ls = tape.shape(l).to_vec();
    l = tape.add_broadcast(l, tcode)?;

    let n = nn::layer_norm(tape, store, "mid.ln_t", l)?;
    let n = to_time(tape, n)?;
    let a = nn::attention(tape, store, "mid.attn_t", n, n, cfg.heads, false)?;
    let a = from_time(tape, a, &ls)?;
    l = tape.add(l, a)?;

    let frames = [b * t, ls[2] * ls[3], cfg.width];
    let n = nn::layer_norm(tape, store, "mid.ln_xs", l)?;
    let n = tape.reshape(n, &frames)?;
    let ctx = tape.reshape(f, &frames)?;
    let a = nn::attention(tape, store, "mid.cross_s", n, ctx, cfg.heads, false)?;
    let a = tape.reshape(a, &ls)?;
    l = tape.add(l, a)?;

    let n = nn::layer_norm(tape, store, "mid.ln_xt", l)?;
    let n = to_time(tape, n)?;
    let ctx = to_time(tape, f)?;
    let a = nn::attention(tape, store, "mid.cross_t", n, ctx, cfg.heads, false)?;
    let a = from_time(tape, a, &ls)?;
    l = tape.add(l, a)?;

    let n = nn::layer_norm(tape, store, "mid.ln_f", l)?;
    let ff = nn::ffn(tape, store, "mid.ffn", n)?;
    l = tape.add(l, ff)?;

    let u = tape.upsample(l, [1, 2, 2])?;
    let cat = tape.concat(&[u, skip])?;
    let h = nn::linear(tape, store, "mix", cat)?;
    let h = tape.gelu(h)?;
    conv3(tape, store, "out", h)
}

/// Inputs of one batched denoiser call plus the preconditioning constants.
pub struct Prepared {
    pub input: Tensor,
    pub motion: Tensor,
    pub noise: Tensor,
    /// Per-element `c_skip * x` and `c_out`.
    pub skip: Vec<f32>,
    pub c_out: Vec<f32>,
}

/// Assembles `[B, T, H, W, *]` inputs for noisy latents `x` at levels `sigmas`.
pub fn prepare(cfg: &DetokConfig, x: &[&[f64]], sigmas: &[f64], packs: &[&ConditionPack]) -> Result<Prepared> {
    let b = packs.len();
    if b == 0 || x.len() != b || sigmas.len() != b {
        return Err(Error::Shape("batch of latents, noise levels and conditions disagree".into()));
    }
    let t = packs[0].t;
    let mut input = Vec::new();
    let mut motion = Vec::new();
    let mut noise = Vec::new();
    let mut skip = Vec::new();
    let mut c_out = Vec::new();
    for ((xi, &sigma), p) in x.iter().zip(sigmas).zip(packs) {
        if p.t != t || p.h != cfg.h || p.w != cfg.w || p.c != cfg.channels || xi.len() != p.numel() {
            return Err(Error::Shape(format!(
                "condition ({}, {}, {}, {}) with {} values does not fit the denoiser",
                p.t,
                p.h,
                p.w,
                p.c,
                xi.len()
            )));
        }
        let pc = precond(sigma, cfg.sigma_data);
        let scaled: Vec<f32> = xi.iter().map(|&v| (v * pc.c_in) as f32).collect();
        input.extend(p.assemble(&scaled)?);
        motion.extend_from_slice(&p.motion);
        noise.extend(noise_features(pc.c_noise));
        skip.extend(xi.iter().map(|&v| (v * pc.c_skip) as f32));
        c_out.extend(std::iter::repeat_n(pc.c_out as f32, xi.len()));
    }
    let (h, w, c) = (cfg.h, cfg.w, cfg.channels);
    Ok(Prepared {
        input: Tensor::new(&[b, t, h, w, 2 * c + 2], input)?,
        motion: Tensor::new(&[b, t, h, w, 2], motion)?,
        noise: Tensor::new(&[b, 1, 1, 1, NOISE_FEATURES], noise)?,
        skip,
        c_out,
    })
}

/// Preconditioned output `c_skip x + c_out F` on the tape.
pub fn denoise_on_tape(cfg: &DetokConfig, store: &ParamStore, tape: &mut Tape, prep: Prepared) -> Result<Var> {
    let f = forward(cfg, store, tape, prep.input, prep.motion, prep.noise)?;
    let shape = tape.shape(f).to_vec();
    let co = tape.constant(Tensor::new(&shape, prep.c_out)?);
    let scaled = tape.mul(f, co)?;
    let sk = tape.constant(Tensor::new(&shape, prep.skip)?);
    Ok(tape.add(scaled, sk)?)
}

/// Small conditional space-time denoiser standing in for a video diffusion U-Net.
#[derive(Debug, Clone)]
pub struct ToyUNet3D {
    pub cfg: DetokConfig,
    pub params: ParamStore,
}

impl ToyUNet3D {
    pub fn new(cfg: DetokConfig) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(&cfg);
        Ok(Self { cfg, params })
    }

    pub fn denoise_batch(&self, x: &[&[f64]], sigmas: &[f64], packs: &[&ConditionPack]) -> Result<Vec<f64>> {
        let prep = prepare(&self.cfg, x, sigmas, packs)?;
        let mut tape = Tape::inference();
        let y = denoise_on_tape(&self.cfg, &self.params, &mut tape, prep)?;
        Ok(tape.value(y).data().iter().map(|&v| v as f64).collect())
    }

    pub fn to_tensors(&self) -> Result<Vec<(String, Tensor)>> {
        let mut out = vec![(
            "meta.detok_json".to_string(),
            checkpoint::text_tensor(&serde_json::to_string(&self.cfg)?),
        )];
        out.extend(self.params.iter().map(|(n, t)| (format!("param.{n}"), t.clone())));
        Ok(out)
    }

    pub fn from_tensors(tensors: &[(String, Tensor)]) -> Result<Self> {
        let meta = tensors
            .iter()
            .find(|(n, _)| n == "meta.detok_json")
            .ok_or_else(|| Error::Format("checkpoint has no detokenizer config".into()))?;
        let cfg: DetokConfig = serde_json::from_str(&checkpoint::tensor_text(&meta.1)?)?;
        let mut net = Self::new(cfg)?;
        let mut seen = 0;
        for (name, t) in tensors {
            if let Some(p) = name.strip_prefix("param.") {
                let slot = net
                    .params
                    .get_mut(p)
                    .ok_or_else(|| Error::Format(format!("unexpected parameter `{p}`")))?;
                if slot.shape() != t.shape() {
                    return Err(Error::Format(format!("parameter `{p}` has shape {:?}", t.shape())));
                }
                *slot = t.clone();
                seen += 1;
            }
        }
        if seen != net.params.len() {
            return Err(Error::Format(format!("checkpoint holds {seen} of {} parameters", net.params.len())));
        }
        Ok(net)
    }
}

impl Denoiser for ToyUNet3D {
    type Cond = ConditionPack;

    fn denoise(&self, x: &[f64], sigma: f64, cond: &ConditionPack) -> Result<Vec<f64>> {
        self.denoise_batch(&[x], &[sigma], &[cond])
    }
}

/// The video denoiser run on a single frame with zero motion, conditioned on a
/// keyframe latent `[H, W, C]`.
#[derive(Debug, Clone, Copy)]
pub struct KeyframeDenoiser<'a>(pub &'a ToyUNet3D);

impl KeyframeDenoiser<'_> {
    pub fn pack(&self, latent: &[f32]) -> ConditionPack {
        let c = &self.0.cfg;
        ConditionPack {
            t: 1,
            h: c.h,
            w: c.w,
            c: c.channels,
            keyframe: latent.to_vec(),
            motion: vec![0.0; c.h * c.w * 2],
        }
    }
}

impl Denoiser for KeyframeDenoiser<'_> {
    type Cond = Vec<f32>;

    fn denoise(&self, x: &[f64], sigma: f64, cond: &Vec<f32>) -> Result<Vec<f64>> {
        if cond.len() != self.0.cfg.frame_len() {
            return Err(Error::Shape(format!(
                "keyframe condition of {} values for a {}-value frame",
                cond.len(),
                self.0.cfg.frame_len()
            )));
        }
        self.0.denoise(x, sigma, &self.pack(cond))
    }
}
