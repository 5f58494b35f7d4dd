//! Toy decoder-only transformer over the unified vocabulary.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use motok_tensor::nn::{self, ParamStore};
use motok_tensor::optim::{clip_grad_norm, cosine_lr};
use motok_tensor::{checkpoint, Optimizer, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::sequence::{scan_prefix, GrammarState, Special, TokenSequence, UnifiedVocab};
use crate::training::{step_rng, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub vocab: UnifiedVocab,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub context: usize,
    pub ffn_mult: usize,
    /// Kept for the config surface; only 0 is supported.
    pub dropout: f32,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab: UnifiedVocab::default(),
            layers: 4,
            dim: 256,
            heads: 4,
            context: 512,
            ffn_mult: 4,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("{} heads do not divide dim {}", self.heads, self.dim)));
        }
        if self.layers == 0 || self.context < 2 || self.ffn_mult == 0 {
            return Err(Error::Config("layers, ffn_mult must be positive and context at least 2".into()));
        }
        if self.dropout != 0.0 {
            return Err(Error::Config("dropout is not supported; set it to 0".into()));
        }
        Ok(())
    }
}

pub fn init_params(cfg: &LmConfig) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (d, v) = (cfg.dim, cfg.vocab.total() as usize);
    let mut s = ParamStore::new();
    s.insert("tok_emb", nn::normal(&[v, d], 0.02, &mut rng));
    s.insert("pos_emb", nn::normal(&[cfg.context, d], 0.02, &mut rng));
    for l in 0..cfg.layers {
        s.init_layer_norm(&format!("b{l}.ln1"), d);
        s.init_attention(&format!("b{l}.attn"), d, d, &mut rng);
        s.init_layer_norm(&format!("b{l}.ln2"), d);
        s.init_ffn(&format!("b{l}.ffn"), d, cfg.ffn_mult, &mut rng);
    }
    s.init_layer_norm("ln_f", d);
    // zero head: uniform logits at initialisation
    s.insert("head.w", Tensor::zeros(&[d, v]));
    s.insert("head.b", Tensor::zeros(&[v]));
    s
}

/// Logits `[B, S, V]` for equal-length rows of `ids` (`B * S` values).
pub fn forward(cfg: &LmConfig, store: &ParamStore, tape: &mut Tape, ids: &[u32], batch: usize) -> Result<Var> {
    let s = ids.len() / batch.max(1);
    if batch == 0 || s * batch != ids.len() || s == 0 {
        return Err(Error::Shape(format!("{} ids do not form {batch} equal rows", ids.len())));
    }
    if s > cfg.context {
        return Err(Error::Range(format!(
            "sequence of {s} tokens exceeds the context of {}; truncate it explicitly",
            cfg.context
        )));
    }
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let table = nn::param(tape, store, "tok_emb")?;
    let mut h = tape.embedding(table, &idx, &[batch, s])?;
    let pos = nn::param(tape, store, "pos_emb")?;
    let p = tape.embedding(pos, &(0..s).collect::<Vec<_>>(), &[s])?;
    h = tape.add_broadcast(h, p)?;
    for l in 0..cfg.layers {
        let n = nn::layer_norm(tape, store, &format!("b{l}.ln1"), h)?;
        let a = nn::attention(tape, store, &format!("b{l}.attn"), n, n, cfg.heads, true)?;
        h = tape.add(h, a)?;
        let n = nn::layer_norm(tape, store, &format!("b{l}.ln2"), h)?;
        let f = nn::ffn(tape, store, &format!("b{l}.ffn"), n)?;
        h = tape.add(h, f)?;
    }
    let n = nn::layer_norm(tape, store, "ln_f", h)?;
    Ok(nn::linear(tape, store, "head", n)?)
}

/// Rows padded with `[PAD]` to a common length, with next-token targets and mask.
pub struct Batch {
    pub ids: Vec<u32>,
    pub rows: usize,
    pub len: usize,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Batch {
    pub fn new(vocab: &UnifiedVocab, seqs: &[&[u32]]) -> Result<Self> {
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        if len < 2 {
            return Err(Error::Contract("next-token loss needs sequences of at least 2 tokens".into()));
        }
        let pad = vocab.special(Special::Pad);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut targets = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            for i in 0..len {
                ids.push(s.get(i).copied().unwrap_or(pad));
                match s.get(i + 1) {
                    Some(&t) if t != pad => {
                        targets.push(t as usize);
                        mask.push(true);
                    }
                    _ => {
                        targets.push(0);
                        mask.push(false);
                    }
                }
            }
        }
        Ok(Self {
            ids,
            rows: seqs.len(),
            len,
            targets,
            mask,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Policy {
    Greedy,
    Temperature(f32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub seq: TokenSequence,
    /// Stopped at the context limit rather than on `[EOS]`.
    pub truncated: bool,
}

#[derive(Debug, Clone)]
pub struct ToyLm {
    pub cfg: LmConfig,
    pub params: ParamStore,
}

impl ToyLm {
    pub fn new(cfg: LmConfig) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(&cfg);
        Ok(Self { cfg, params })
    }

    /// Logits for one sequence, `[S, V]` row-major.
    pub fn logits(&self, ids: &[u32]) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let y = forward(&self.cfg, &self.params, &mut tape, ids, 1)?;
        Ok(tape.value(y).reshape(&[ids.len(), self.cfg.vocab.total() as usize])?)
    }

    /// Mean next-token negative log-likelihood; `[PAD]` targets are excluded.
    pub fn nll(&self, seq: &TokenSequence) -> Result<f32> {
        self.nll_batch(&[&seq.ids])
    }

    pub fn nll_batch(&self, seqs: &[&[u32]]) -> Result<f32> {
        let b = Batch::new(&self.cfg.vocab, seqs)?;
        let mut tape = Tape::inference();
        let y = forward(&self.cfg, &self.params, &mut tape, &b.ids, b.rows)?;
        let l = tape.cross_entropy(y, &b.targets, &b.mask)?;
        Ok(tape.value(l).data()[0])
    }

    /// Extends `prefix` until `[EOS]` or the context limit.
    pub fn generate(
        &self,
        prefix: &TokenSequence,
        policy: Policy,
        constrained: bool,
        rng: &mut impl Rng,
    ) -> Result<Generated> {
        let vocab = self.cfg.vocab;
        let mut state = scan_prefix(&vocab, &prefix.ids).map_err(|v| Error::Contract(format!("invalid prefix at {v}")))?;
        let mut ids = prefix.ids.clone();
        if ids.is_empty() {
            ids.push(vocab.special(Special::Bos));
            state = GrammarState::Outside;
        }
        let eos = vocab.special(Special::Eos);
        let mut truncated = false;
        while state != GrammarState::Ended && ids.last() != Some(&eos) {
            if ids.len() >= self.cfg.context {
                truncated = true;
                break;
            }
            let logits = self.logits(&ids)?;
            let v = vocab.total() as usize;
            let mut row = logits.data()[(ids.len() - 1) * v..].to_vec();
            if constrained {
                let allowed = state.allowed(&vocab, self.cfg.context - ids.len());
                for (x, ok) in row.iter_mut().zip(&allowed) {
                    if !ok {
                        *x = f32::NEG_INFINITY;
                    }
                }
            }
            let next = pick(&row, policy, rng);
            if constrained {
                state = state
                    .step(&vocab, ids.len(), next)
                    .map_err(|v| Error::Contract(format!("grammar mask admitted a violation: {v}")))?;
            }
            ids.push(next);
        }
        Ok(Generated {
            seq: TokenSequence::from_ids(&vocab, ids)?,
            truncated,
        })
    }

    pub fn to_tensors(&self) -> Result<Vec<(String, Tensor)>> {
        let mut out = vec![(
            "meta.lm_json".to_string(),
            checkpoint::text_tensor(&serde_json::to_string(&self.cfg)?),
        )];
        out.extend(self.params.iter().map(|(n, t)| (format!("param.{n}"), t.clone())));
        Ok(out)
    }

    pub fn from_tensors(tensors: &[(String, Tensor)]) -> Result<Self> {
        let meta = tensors
            .iter()
            .find(|(n, _)| n == "meta.lm_json")
            .ok_or_else(|| Error::Format("checkpoint has no language model config".into()))?;
        let cfg: LmConfig = serde_json::from_str(&checkpoint::tensor_text(&meta.1)?)?;
        let mut lm = Self::new(cfg)?;
        let mut seen = 0;
        for (name, t) in tensors {
            if let Some(p) = name.strip_prefix("param.") {
                let slot = lm
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
        if seen != lm.params.len() {
            return Err(Error::Format(format!("checkpoint holds {seen} of {} parameters", lm.params.len())));
        }
        Ok(lm)
    }
}

/// Argmax (smallest index on ties) or a draw from `softmax(row / tau)`.
fn pick(row: &[f32], policy: Policy, rng: &mut impl Rng) -> u32 {
    let greedy = || {
        let mut best = 0;
        for (i, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = i;
            }
        }
        best as u32
    };
    match policy {
        Policy::Greedy => greedy(),
        Policy::Temperature(t) if t <= 0.0 => greedy(),
        Policy::Temperature(t) => {
            let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let w: Vec<f64> = row.iter().map(|&x| ((x as f64 - mx) / t as f64).exp()).collect();
            let total: f64 = w.iter().sum();
            let mut u = rng.random::<f64>() * total;
            for (i, &p) in w.iter().enumerate() {
                if p > 0.0 && u < p {
                    return i as u32;
                }
                u -= p;
            }
            greedy()
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmTrainer {
    pub lm: ToyLm,
    pub opt: Optimizer,
    pub tcfg: TrainConfig,
    pub step: usize,
}

impl LmTrainer {
    pub fn new(lm: ToyLm, tcfg: TrainConfig) -> Self {
        let opt = Optimizer::adamw(tcfg.lr, tcfg.weight_decay).with_betas((0.9, 0.95));
        Self { lm, opt, tcfg, step: 0 }
    }

    /// One AdamW step on the given rows; on a non-finite loss the state is left untouched.
    pub fn train_step(&mut self, seqs: &[&[u32]]) -> Result<f32> {
        let b = Batch::new(&self.lm.cfg.vocab, seqs)?;
        let mut tape = Tape::new();
        let y = forward(&self.lm.cfg, &self.lm.params, &mut tape, &b.ids, b.rows)?;
        let loss = tape.cross_entropy(y, &b.targets, &b.mask)?;
        let lv = tape.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss at step {}", self.step)));
        }
        let mut grads = tape.backward(loss)?.params();
        clip_grad_norm(&mut grads, self.tcfg.grad_clip);
        self.opt.lr = cosine_lr(self.step, self.tcfg.steps, self.tcfg.warmup_steps(), self.tcfg.lr);
        self.opt.step(&mut self.lm.params, &grads)?;
        self.step += 1;
        Ok(lv)
    }

    pub fn batch_indices(&self, n: usize) -> Vec<usize> {
        let mut rng = step_rng(self.tcfg.seed, self.step, 1);
        let mut idx = sample(&mut rng, n, self.tcfg.batch.min(n)).into_vec();
        idx.sort_unstable();
        idx
    }

    pub fn step_on(&mut self, corpus: &[TokenSequence]) -> Result<f32> {
        if corpus.is_empty() {
            return Err(Error::Contract("empty corpus".into()));
        }
        let rows: Vec<&[u32]> = self.batch_indices(corpus.len()).iter().map(|&i| corpus[i].ids.as_slice()).collect();
        self.train_step(&rows)
    }

    /// Trains to `tcfg.steps`, returning the loss curve.
    pub fn run(&mut self, corpus: &[TokenSequence], mut log: impl FnMut(usize, f32)) -> Result<Vec<f32>> {
        if let Some(s) = corpus.iter().find(|s| s.len() > self.lm.cfg.context) {
            return Err(Error::Range(format!(
                "corpus sequence of {} tokens exceeds the context of {}",
                s.len(),
                self.lm.cfg.context
            )));
        }
        let mut curve = Vec::new();
        while self.step < self.tcfg.steps {
            let l = self.step_on(corpus)?;
            log(self.step - 1, l);
            curve.push(l);
        }
        Ok(curve)
    }

    pub fn to_tensors(&self) -> Result<Vec<(String, Tensor)>> {
        let mut out = self.lm.to_tensors()?;
        out.push((
            "meta.train_json".into(),
            checkpoint::text_tensor(&serde_json::to_string(&self.tcfg)?),
        ));
        out.push(("meta.step".into(), Tensor::new(&[1], vec![self.step as f32])?));
        out.extend(self.opt.state_tensors("opt"));
        Ok(out)
    }

    pub fn from_tensors(tensors: &[(String, Tensor)]) -> Result<Self> {
        let lm = ToyLm::from_tensors(tensors)?;
        let find = |n: &str| tensors.iter().find(|(k, _)| k == n).map(|(_, t)| t);
        let tcfg: TrainConfig = match find("meta.train_json") {
            Some(t) => serde_json::from_str(&checkpoint::tensor_text(t)?)?,
            None => TrainConfig::default(),
        };
        let step = find("meta.step").map(|t| t.data()[0] as usize).unwrap_or(0);
        let mut t = Self::new(lm, tcfg);
        t.opt.load_state("opt", tensors)?;
        t.step = step;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> LmConfig {
        LmConfig {
            vocab: UnifiedVocab::new(16, 8, 8).unwrap(),
            layers: 1,
            dim: 16,
            heads: 2,
            context: 24,
            ffn_mult: 2,
            dropout: 0.0,
            seed: 1,
        }
    }

    #[test]
    fn zero_head_is_uniform() {
        let lm = ToyLm::new(tiny()).unwrap();
        let seq = TokenSequence::from_ids(&lm.cfg.vocab, vec![1, 2, 3, 4, 5]).unwrap();
        let l = lm.nll(&seq).unwrap();
        assert!((l - (lm.cfg.vocab.total() as f32).ln()).abs() < 1e-5);
    }

    #[test]
    fn context_overflow_is_an_error() {
        let lm = ToyLm::new(tiny()).unwrap();
        let seq = TokenSequence::from_ids(&lm.cfg.vocab, vec![1; 25]).unwrap();
        assert!(matches!(lm.nll(&seq), Err(Error::Range(_))));
    }

    #[test]
    fn pad_targets_are_masked() {
        let v = tiny().vocab;
        let b = Batch::new(&v, &[&[1, 2, 3], &[4, 5]]).unwrap();
        assert_eq!(b.len, 3);
        assert_eq!(b.mask, vec![true, true, false, true, false, false]);
    }
}
