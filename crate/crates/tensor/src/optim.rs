use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;

use crate::nn::ParamStore;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f32,
    pub betas: (f32, f32),
    pub eps: f32,
    pub weight_decay: f32,
    step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl Optimizer {
    pub fn sgd(lr: f32) -> Self {
        Self::new(OptimizerKind::Sgd, lr, (0.0, 0.0), 0.0)
    }

    /// AdamW with the tokenizer defaults: betas (0.9, 0.99), eps 1e-6.
    pub fn adamw(lr: f32, weight_decay: f32) -> Self {
        Self::new(OptimizerKind::AdamW, lr, (0.9, 0.99), weight_decay)
    }

    pub fn new(kind: OptimizerKind, lr: f32, betas: (f32, f32), weight_decay: f32) -> Self {
        Self {
            kind,
            lr,
            betas,
            eps: 1e-6,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn with_betas(mut self, betas: (f32, f32)) -> Self {
        self.betas = betas;
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |b: f32| (0.0..1.0).contains(&b);
        if !ok(self.betas.0) || !ok(self.betas.1) {
            return Err(TensorError::Config(format!("betas {:?} outside [0, 1)", self.betas)));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(TensorError::Config(format!("learning rate {}", self.lr)));
        }
        Ok(())
    }

    /// Applies one update. Parameters without a gradient entry are left alone.
    /// A non-finite gradient rejects the whole step before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore, grads: &HashMap<String, Tensor>) -> Result<()> {
        self.validate()?;
        let mut names: Vec<&String> = grads.keys().collect();
        names.sort();
        for name in &names {
            let g = &grads[*name];
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(TensorError::Shape {
                    op: "optimizer step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(TensorError::NonFinite((*name).clone()));
            }
        }
        self.step += 1;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - (b1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (b2 as f64).powi(self.step as i32);
        for name in names {
            let g = grads[name].data();
            let p = params.get_mut(name).expect("checked above").data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (pi, gi) in p.iter_mut().zip(g) {
                        *pi -= self.lr * (gi + self.weight_decay * *pi);
                    }
                }
                OptimizerKind::AdamW => {
                    let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    for i in 0..g.len() {
                        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                        let mh = m[i] as f64 / bc1;
                        let vh = v[i] as f64 / bc2;
                        let upd = mh / (vh.sqrt() + self.eps as f64) + (self.weight_decay * p[i]) as f64;
                        p[i] -= (self.lr as f64 * upd) as f32;
                    }
                }
            }
        }
        Ok(())
    }

    /// Moment buffers and step counter as named tensors, for checkpointing.
    pub fn state_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = vec![(
            format!("{prefix}.step"),
            Tensor::new(&[2], split_u64(self.step)).unwrap(),
        )];
        for (kind, map) in [("m", &self.m), ("v", &self.v)] {
            for (name, buf) in map {
                out.push((
                    format!("{prefix}.{kind}.{name}"),
                    Tensor::new(&[buf.len()], buf.clone()).unwrap(),
                ));
            }
        }
        out
    }

    pub fn load_state(&mut self, prefix: &str, tensors: &[(String, Tensor)]) -> Result<()> {
        self.m.clear();
        self.v.clear();
        self.step = 0;
        let step_key = format!("{prefix}.step");
        for (name, t) in tensors {
            if *name == step_key {
                self.step = join_u64(t.data())?;
            } else if let Some(rest) = name.strip_prefix(&format!("{prefix}.m.")) {
                self.m.insert(rest.to_string(), t.data().to_vec());
            } else if let Some(rest) = name.strip_prefix(&format!("{prefix}.v.")) {
                self.v.insert(rest.to_string(), t.data().to_vec());
            }
        }
        Ok(())
    }

    /// Moment buffer for a parameter, if one has been allocated.
    pub fn moments(&self, name: &str) -> Option<(&[f32], &[f32])> {
        Some((self.m.get(name)?.as_slice(), self.v.get(name)?.as_slice()))
    }
}

// u64 stored as two 24-bit-safe halves so it survives the f32 payload exactly.
fn split_u64(x: u64) -> Vec<f32> {
    vec![(x >> 24) as f32, (x & 0xFF_FFFF) as f32]
}

fn join_u64(d: &[f32]) -> Result<u64> {
    if d.len() != 2 {
        return Err(TensorError::Format("step counter must hold 2 values".into()));
    }
    Ok(((d[0] as u64) << 24) | d[1] as u64)
}

/// Linear warmup followed by cosine decay to zero.
pub fn cosine_lr(step: usize, total: usize, warmup: usize, base: f32) -> f32 {
    if step < warmup {
        return base * (step + 1) as f32 / warmup as f32;
    }
    let span = total.saturating_sub(warmup).max(1);
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    (base as f64 * 0.5 * (1.0 + (PI * t).cos())) as f32
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut HashMap<String, Tensor>, max_norm: f32) -> f32 {
    let mut names: Vec<String> = grads.keys().cloned().collect();
    names.sort();
    let sq: f64 = names
        .iter()
        .flat_map(|n| grads[n].data().iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum();
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}
