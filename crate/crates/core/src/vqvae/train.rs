use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use motok_tensor::optim::{clip_grad_norm, cosine_lr};
use motok_tensor::{Optimizer, Tape, Tensor};

use crate::error::{Error, Result};
use crate::motion::MotionField;
use crate::training::{step_rng, TrainConfig};
use crate::vqvae::codebook::{codebook_usage, Usage};
use crate::vqvae::model::{decoder_forward, encoder_forward, MotionVqvae};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub recon: f32,
    pub commit: f32,
    pub total: f32,
    pub grad_norm: f32,
    pub revived: usize,
}

/// Model, optimizer and step counter: everything needed to resume exactly.
#[derive(Debug, Clone)]
pub struct VqvaeTrainer {
    pub model: MotionVqvae,
    pub opt: Optimizer,
    pub tcfg: TrainConfig,
    pub step: usize,
}

impl VqvaeTrainer {
    pub fn new(model: MotionVqvae, tcfg: TrainConfig) -> Self {
        let opt = Optimizer::adamw(tcfg.lr, tcfg.weight_decay);
        Self { model, opt, tcfg, step: 0 }
    }

    /// Loss on one batch plus the gradient update, EMA update and dead-code revival.
    pub fn train_step(&mut self, batch: &[&MotionField]) -> Result<StepStats> {
        let cfg = self.model.cfg.clone();
        let x = self.model.batch_tensor(batch)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let z = encoder_forward(&cfg, &self.model.params, &mut tape, xv)?;
        let zval = tape.value(z).clone();
        let ids = self.model.codebook.quantize_batch(zval.data())?;
        let q = Tensor::new(zval.shape(), self.model.codebook.lookup(&ids)?)?;
        let zq = tape.straight_through(z, &q)?;
        let qc = tape.constant(q);
        let commit = tape.mse(z, qc)?;
        let commit_w = tape.scale(commit, cfg.beta)?;
        let y = decoder_forward(&cfg, &self.model.params, &mut tape, zq)?;
        let recon = tape.mse(y, xv)?;
        let total = tape.add(recon, commit_w)?;
        let (rl, cl, tl) = (
            tape.value(recon).data()[0],
            tape.value(commit).data()[0],
            tape.value(total).data()[0],
        );
        if !tl.is_finite() {
            let n = zval.numel() as f64;
            let mean = zval.data().iter().map(|&v| v as f64).sum::<f64>() / n;
            let std = (zval.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
            let usage = codebook_usage(&ids, cfg.codebook_size)?;
            return Err(Error::Diverged(format!(
                "non-finite loss at step {}: latent std {std:.4e}, codebook perplexity {:.2}, {} codes used",
                self.step, usage.perplexity, usage.used
            )));
        }
        let mut grads = tape.backward(total)?.params();
        let grad_norm = clip_grad_norm(&mut grads, self.tcfg.grad_clip);
        self.opt.lr = cosine_lr(self.step, self.tcfg.steps, self.tcfg.warmup_steps(), self.tcfg.lr);
        self.opt.step(&mut self.model.params, &grads)?;
        self.model.codebook.ema_update(&ids, zval.data())?;
        let mut rng = step_rng(self.tcfg.seed, self.step, 2);
        let revived = self.model.codebook.revive_dead(cfg.dead_code_steps, zval.data(), &mut rng);
        let stats = StepStats {
            step: self.step,
            recon: rl,
            commit: cl,
            total: tl,
            grad_norm,
            revived,
        };
        self.step += 1;
        Ok(stats)
    }

    /// Indices of the batch for the current step, drawn from `step_rng`.
    pub fn batch_indices(&self, n: usize) -> Vec<usize> {
        let mut rng = step_rng(self.tcfg.seed, self.step, 1);
        let b = self.tcfg.batch.min(n);
        let mut idx = sample(&mut rng, n, b).into_vec();
        idx.sort_unstable();
        idx
    }

    pub fn step_on(&mut self, data: &[MotionField]) -> Result<StepStats> {
        if data.is_empty() {
            return Err(Error::Contract("empty training set".into()));
        }
        let idx = self.batch_indices(data.len());
        let batch: Vec<&MotionField> = idx.iter().map(|&i| &data[i]).collect();
        self.train_step(&batch)
    }

    /// Runs until `tcfg.steps`, calling `log` after each step.
    pub fn run(&mut self, data: &[MotionField], mut log: impl FnMut(&StepStats)) -> Result<Vec<StepStats>> {
        let mut out = Vec::new();
        while self.step < self.tcfg.steps {
            let s = self.step_on(data)?;
            log(&s);
            out.push(s);
        }
        Ok(out)
    }

    pub fn to_tensors(&self) -> Result<Vec<(String, Tensor)>> {
        let mut out = self.model.to_tensors()?;
        out.push((
            "meta.train_json".into(),
            motok_tensor::checkpoint::text_tensor(&serde_json::to_string(&self.tcfg)?),
        ));
        out.push(("meta.step".into(), Tensor::new(&[1], vec![self.step as f32])?));
        out.extend(self.opt.state_tensors("opt"));
        Ok(out)
    }

    pub fn from_tensors(tensors: &[(String, Tensor)]) -> Result<Self> {
        let model = MotionVqvae::from_tensors(tensors)?;
        let find = |n: &str| tensors.iter().find(|(k, _)| k == n).map(|(_, t)| t);
        let tcfg: TrainConfig = match find("meta.train_json") {
            Some(t) => serde_json::from_str(&motok_tensor::checkpoint::tensor_text(t)?)?,
            None => TrainConfig::default(),
        };
        let step = find("meta.step").map(|t| t.data()[0] as usize).unwrap_or(0);
        let mut opt = Optimizer::adamw(tcfg.lr, tcfg.weight_decay);
        opt.load_state("opt", tensors)?;
        Ok(Self { model, opt, tcfg, step })
    }
}

/// Mean squared reconstruction error over fields (through the quantizer, clamped output).
pub fn recon_mse(model: &MotionVqvae, fields: &[MotionField]) -> Result<f64> {
    let mut total = 0.0f64;
    let mut n = 0usize;
    for f in fields {
        let r = model.reconstruct(f)?;
        for (a, b) in r.vectors.iter().zip(&f.vectors) {
            total += ((a - b) as f64).powi(2);
        }
        n += f.vectors.len();
    }
    Ok(total / n as f64)
}

pub fn eval_usage(model: &MotionVqvae, fields: &[MotionField]) -> Result<Usage> {
    let mut ids = Vec::new();
    for f in fields {
        ids.extend(model.tokenize(f)?);
    }
    codebook_usage(&ids, model.cfg.codebook_size)
}
