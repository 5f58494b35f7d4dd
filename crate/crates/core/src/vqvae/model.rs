use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use motok_tensor::nn::{self, ParamStore};
use motok_tensor::{checkpoint, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::layers::{add_positions, init_positions, init_st_block, st_block};
use crate::motion::MotionField;
use crate::vqvae::codebook::{Codebook, Metric};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axes {
    /// Halve H and W.
    S,
    /// Halve T.
    T,
    /// Halve T, H and W.
    ST,
}

impl Axes {
    pub fn factors(self) -> [usize; 3] {
        match self {
            Axes::S => [1, 2, 2],
            Axes::T => [2, 1, 1],
            Axes::ST => [2, 2, 2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Downsample {
    /// 1-based encoder block index the layer follows.
    pub after_block: usize,
    pub axes: Axes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqvaeConfig {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub blocks: usize,
    pub downsample: Vec<Downsample>,
    pub d_code: usize,
    pub codebook_size: usize,
    pub decay: f32,
    pub beta: f32,
    pub dead_code_steps: u32,
    pub seed: u64,
}

impl Default for VqvaeConfig {
    fn default() -> Self {
        Self {
            t: 24,
            h: 20,
            w: 36,
            d_model: 512,
            heads: 8,
            ffn_mult: 4,
            blocks: 12,
            downsample: vec![
                Downsample { after_block: 3, axes: Axes::S },
                Downsample { after_block: 6, axes: Axes::T },
                Downsample { after_block: 9, axes: Axes::ST },
                Downsample { after_block: 12, axes: Axes::T },
            ],
            d_code: 32,
            codebook_size: 1024,
            decay: 0.995,
            beta: 0.25,
            dead_code_steps: 512,
            seed: 0,
        }
    }
}

impl VqvaeConfig {
    /// Latent grid `(t, h, w)` after every downsample layer.
    pub fn latent_grid(&self) -> Result<(usize, usize, usize)> {
        let mut g = [self.t, self.h, self.w];
        for ds in &self.downsample {
            for (dim, f) in g.iter_mut().zip(ds.axes.factors()) {
                if *dim % f != 0 {
                    return Err(Error::Config(format!(
                        "downsample after block {} cannot halve grid {:?}",
                        ds.after_block, g
                    )));
                }
                *dim /= f;
            }
        }
        Ok((g[0], g[1], g[2]))
    }

    pub fn num_tokens(&self) -> Result<usize> {
        let (t, h, w) = self.latent_grid()?;
        Ok(t * h * w)
    }

    fn downsample_after(&self, block: usize) -> Option<&Downsample> {
        self.downsample.iter().find(|d| d.after_block == block)
    }

    /// Decoder block `j` (1-based) is preceded by an upsample mirroring encoder block `blocks - j + 1`.
    fn upsample_before(&self, j: usize) -> Option<&Downsample> {
        self.downsample_after(self.blocks + 1 - j)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |n: usize, what: &str| {
            if n == 0 {
                Err(Error::Config(format!("{what} must be positive")))
            } else {
                Ok(())
            }
        };
        pos(self.t, "t")?;
        pos(self.h, "h")?;
        pos(self.w, "w")?;
        pos(self.d_model, "d_model")?;
        pos(self.blocks, "blocks")?;
        pos(self.d_code, "d_code")?;
        pos(self.codebook_size, "codebook_size")?;
        pos(self.ffn_mult, "ffn_mult")?;
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("{} heads do not divide d_model {}", self.heads, self.d_model)));
        }
        let mut seen = std::collections::BTreeSet::new();
        for ds in &self.downsample {
            if ds.after_block == 0 || ds.after_block > self.blocks || !seen.insert(ds.after_block) {
                return Err(Error::Config(format!("invalid downsample position {}", ds.after_block)));
            }
        }
        if !(0.0..=1.0).contains(&self.decay) || self.beta < 0.0 {
            return Err(Error::Config("decay must be in [0,1] and beta non-negative".into()));
        }
        self.latent_grid()?;
        Ok(())
    }
}

pub fn init_params(cfg: &VqvaeConfig) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.d_model;
    let mut s = ParamStore::new();
    s.init_linear("enc.in", 2, d, &mut rng);
    init_positions(&mut s, "enc", cfg.t, cfg.h, cfg.w, d, &mut rng);
    for b in 1..=cfg.blocks {
        init_st_block(&mut s, &format!("enc.b{b}"), d, cfg.ffn_mult, &mut rng);
        if cfg.downsample_after(b).is_some() {
            s.init_linear(&format!("enc.down{b}"), d, d, &mut rng);
        }
    }
    s.init_layer_norm("enc.ln_out", d);
    s.init_linear("enc.proj", d, cfg.d_code, &mut rng);

    let (lt, lh, lw) = cfg.latent_grid().expect("validated config");
    s.init_linear("dec.in", cfg.d_code, d, &mut rng);
    init_positions(&mut s, "dec.p0", lt, lh, lw, d, &mut rng);
    let mut g = [lt, lh, lw];
    for j in 1..=cfg.blocks {
        if let Some(ds) = cfg.upsample_before(j) {
            for (dim, f) in g.iter_mut().zip(ds.axes.factors()) {
                *dim *= f;
            }
            s.init_linear(&format!("dec.up{j}"), d, d, &mut rng);
            init_positions(&mut s, &format!("dec.p{j}"), g[0], g[1], g[2], d, &mut rng);
        }
        init_st_block(&mut s, &format!("dec.b{j}"), d, cfg.ffn_mult, &mut rng);
    }
    s.init_layer_norm("dec.ln_out", d);
    s.init_linear("dec.out", d, 2, &mut rng);
    s
}

/// Encoder on the tape: `[B, T, H, W, 2] -> [B, t, h, w, d_code]`.
pub fn encoder_forward(cfg: &VqvaeConfig, store: &ParamStore, tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 5 || s[1..] != [cfg.t, cfg.h, cfg.w, 2] {
        return Err(Error::Shape(format!(
            "encoder expects (T,H,W) = ({}, {}, {}) with 2 channels, got {:?}",
            cfg.t, cfg.h, cfg.w, s
        )));
    }
    let mut h = nn::linear(tape, store, "enc.in", x)?;
    h = add_positions(tape, store, "enc", h)?;
    for b in 1..=cfg.blocks {
        h = st_block(tape, store, &format!("enc.b{b}"), h, cfg.heads)?;
        if let Some(ds) = cfg.downsample_after(b) {
            h = tape.avg_pool(h, ds.axes.factors())?;
            h = nn::linear(tape, store, &format!("enc.down{b}"), h)?;
        }
    }
    h = nn::layer_norm(tape, store, "enc.ln_out", h)?;
    nn::linear(tape, store, "enc.proj", h).map_err(Into::into)
}

/// Decoder on the tape: `[B, t, h, w, d_code] -> [B, T, H, W, 2]` (unclamped).
pub fn decoder_forward(cfg: &VqvaeConfig, store: &ParamStore, tape: &mut Tape, q: Var) -> Result<Var> {
    let mut h = nn::linear(tape, store, "dec.in", q)?;
    h = add_positions(tape, store, "dec.p0", h)?;
    for j in 1..=cfg.blocks {
        if let Some(ds) = cfg.upsample_before(j) {
            h = tape.upsample(h, ds.axes.factors())?;
            h = nn::linear(tape, store, &format!("dec.up{j}"), h)?;
            h = add_positions(tape, store, &format!("dec.p{j}"), h)?;
        }
        h = st_block(tape, store, &format!("dec.b{j}"), h, cfg.heads)?;
    }
    h = nn::layer_norm(tape, store, "dec.ln_out", h)?;
    nn::linear(tape, store, "dec.out", h).map_err(Into::into)
}

/// Motion tokenizer: encoder, cosine-metric EMA codebook and decoder.
#[derive(Debug, Clone)]
pub struct MotionVqvae {
    pub cfg: VqvaeConfig,
    pub params: ParamStore,
    pub codebook: Codebook,
}

impl MotionVqvae {
    pub fn new(cfg: VqvaeConfig) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC0DE);
        let codebook = Codebook::random(cfg.codebook_size, cfg.d_code, Metric::Cosine, cfg.decay, &mut rng);
        Ok(Self { cfg, params, codebook })
    }

    pub fn num_tokens(&self) -> usize {
        self.cfg.num_tokens().expect("validated config")
    }

    /// Stacks fields into a `[B, T, H, W, 2]` tensor after checking their geometry.
    pub fn batch_tensor(&self, fields: &[&MotionField]) -> Result<Tensor> {
        let c = &self.cfg;
        let mut data = Vec::with_capacity(fields.len() * c.t * c.h * c.w * 2);
        for f in fields {
            if f.t != c.t || f.hb != c.h || f.wb != c.w {
                return Err(Error::Shape(format!(
                    "tokenizer expects (T,H,W) = ({}, {}, {}), got ({}, {}, {})",
                    c.t, c.h, c.w, f.t, f.hb, f.wb
                )));
            }
            if !f.normalized {
                return Err(Error::Contract("tokenizer input must be normalized".into()));
            }
            data.extend_from_slice(&f.vectors);
        }
        Ok(Tensor::new(&[fields.len(), c.t, c.h, c.w, 2], data)?)
    }

    /// Continuous latents `[N, d_code]` for one field.
    pub fn encode(&self, field: &MotionField) -> Result<Tensor> {
        let x = self.batch_tensor(&[field])?;
        let mut tape = Tape::inference();
        let xv = tape.constant(x);
        let z = encoder_forward(&self.cfg, &self.params, &mut tape, xv)?;
        Ok(tape.value(z).reshape(&[self.num_tokens(), self.cfg.d_code])?)
    }

    pub fn tokenize(&self, field: &MotionField) -> Result<Vec<usize>> {
        let z = self.encode(field)?;
        self.codebook.quantize_batch(z.data())
    }

    /// Decoded field, clamped to `[-1, 1]`.
    pub fn decode(&self, ids: &[usize]) -> Result<MotionField> {
        let n = self.num_tokens();
        if ids.len() != n {
            return Err(Error::Shape(format!("expected {n} motion tokens, got {}", ids.len())));
        }
        let (lt, lh, lw) = self.cfg.latent_grid()?;
        let codes = self.codebook.lookup(ids)?;
        let mut tape = Tape::inference();
        let q = tape.constant(Tensor::new(&[1, lt, lh, lw, self.cfg.d_code], codes)?);
        let y = decoder_forward(&self.cfg, &self.params, &mut tape, q)?;
        let vectors = tape.value(y).data().iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        MotionField::from_vectors(self.cfg.t, self.cfg.h, self.cfg.w, vectors, true)
    }

    pub fn reconstruct(&self, field: &MotionField) -> Result<MotionField> {
        self.decode(&self.tokenize(field)?)
    }

    pub fn to_tensors(&self) -> Result<Vec<(String, Tensor)>> {
        let mut out = vec![(
            "meta.config_json".to_string(),
            checkpoint::text_tensor(&serde_json::to_string(&self.cfg)?),
        )];
        out.extend(self.params.iter().map(|(n, t)| (format!("param.{n}"), t.clone())));
        out.extend(self.codebook.to_tensors("codebook"));
        Ok(out)
    }

    pub fn from_tensors(tensors: &[(String, Tensor)]) -> Result<Self> {
        let cfg_t = tensors
            .iter()
            .find(|(n, _)| n == "meta.config_json")
            .ok_or_else(|| Error::Format("checkpoint has no embedded tokenizer config".into()))?;
        let cfg: VqvaeConfig = serde_json::from_str(&checkpoint::tensor_text(&cfg_t.1)?)?;
        cfg.validate()?;
        let template = init_params(&cfg);
        let mut params = ParamStore::new();
        for (name, t) in tensors {
            if let Some(p) = name.strip_prefix("param.") {
                let expect = template
                    .get(p)
                    .map_err(|_| Error::Format(format!("unexpected parameter `{p}` for this config")))?;
                if expect.shape() != t.shape() {
                    return Err(Error::Format(format!(
                        "parameter `{p}` has shape {:?}, config implies {:?}",
                        t.shape(),
                        expect.shape()
                    )));
                }
                params.insert(p, t.clone());
            }
        }
        if params.len() != template.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} of {} parameters",
                params.len(),
                template.len()
            )));
        }
        let codebook = Codebook::from_tensors("codebook", tensors, Metric::Cosine, cfg.decay)?;
        if codebook.k != cfg.codebook_size || codebook.d != cfg.d_code {
            return Err(Error::Format("codebook shape disagrees with config".into()));
        }
        Ok(Self { cfg, params, codebook })
    }
}
