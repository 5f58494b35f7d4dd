//! Named parameter storage and the layer building blocks shared by every model.
//!
//! Layers are free functions over a [`Tape`] and a [`ParamStore`]; the store is
//! read-only during a forward pass and parameters enter the tape as named leaves.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| TensorError::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Parameters in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn init_linear(&mut self, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) {
        let std = (1.0 / d_in as f32).sqrt();
        self.insert(format!("{name}.w"), normal(&[d_in, d_out], std, rng));
        self.insert(format!("{name}.b"), Tensor::zeros(&[d_out]));
    }

    pub fn init_layer_norm(&mut self, name: &str, d: usize) {
        self.insert(format!("{name}.g"), Tensor::ones(&[d]));
        self.insert(format!("{name}.b"), Tensor::zeros(&[d]));
    }

    /// Query/key/value/output projections; keys and values read from width `d_kv`.
    pub fn init_attention(&mut self, name: &str, d: usize, d_kv: usize, rng: &mut impl Rng) {
        self.init_linear(&format!("{name}.q"), d, d, rng);
        self.init_linear(&format!("{name}.k"), d_kv, d, rng);
        self.init_linear(&format!("{name}.v"), d_kv, d, rng);
        self.init_linear(&format!("{name}.o"), d, d, rng);
    }

    pub fn init_ffn(&mut self, name: &str, d: usize, mult: usize, rng: &mut impl Rng) {
        self.init_linear(&format!("{name}.fc1"), d, d * mult, rng);
        self.init_linear(&format!("{name}.fc2"), d * mult, d, rng);
    }
}

pub fn normal(shape: &[usize], std: f32, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("std must be finite and non-negative");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape")
}

pub fn param(tape: &mut Tape, store: &ParamStore, name: &str) -> Result<Var> {
    Ok(tape.param(name, store.get(name)?))
}

/// `x @ w + b` over the last axis.
pub fn linear(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = param(tape, store, &format!("{name}.w"))?;
    let b = param(tape, store, &format!("{name}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_broadcast(y, b)
}

pub fn layer_norm(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let g = param(tape, store, &format!("{name}.g"))?;
    let b = param(tape, store, &format!("{name}.b"))?;
    let n = tape.layer_norm(x)?;
    let y = tape.mul_row(n, g)?;
    tape.add_broadcast(y, b)
}

/// Multi-head attention with projections; `x` is `[B, S, D]`, `ctx` is `[B, S', D_kv]`.
pub fn attention(
    tape: &mut Tape,
    store: &ParamStore,
    name: &str,
    x: Var,
    ctx: Var,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let q = linear(tape, store, &format!("{name}.q"), x)?;
    let k = linear(tape, store, &format!("{name}.k"), ctx)?;
    let v = linear(tape, store, &format!("{name}.v"), ctx)?;
    let a = tape.attention(q, k, v, heads, causal)?;
    linear(tape, store, &format!("{name}.o"), a)
}

pub fn ffn(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let h = linear(tape, store, &format!("{name}.fc1"), x)?;
    let h = tape.gelu(h)?;
    linear(tape, store, &format!("{name}.fc2"), h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_applies_bias() {
        let mut store = ParamStore::new();
        store.insert("l.w", Tensor::eye(2));
        store.insert("l.b", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap());
        let y = linear(&mut tape, &store, "l", x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 3.0]);
    }

    #[test]
    fn init_is_seeded() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        a.init_ffn("f", 8, 2, &mut ChaCha8Rng::seed_from_u64(3));
        b.init_ffn("f", 8, 2, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }
}
