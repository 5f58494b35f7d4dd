//! Factorised space-time transformer block over `[B, T, H, W, D]` activations.

use motok_tensor::nn::{self, ParamStore};
use motok_tensor::{Tape, Var};
use rand::Rng;

use crate::error::Result;

pub fn init_st_block(store: &mut ParamStore, name: &str, d: usize, ffn_mult: usize, rng: &mut impl Rng) {
    store.init_layer_norm(&format!("{name}.ln_s"), d);
    store.init_attention(&format!("{name}.attn_s"), d, d, rng);
    store.init_layer_norm(&format!("{name}.ln_t"), d);
    store.init_attention(&format!("{name}.attn_t"), d, d, rng);
    store.init_layer_norm(&format!("{name}.ln_f"), d);
    store.init_ffn(&format!("{name}.ffn"), d, ffn_mult, rng);
}

/// Spatial attention over `H*W` per frame, temporal attention over `T` per
/// location, then a feed-forward layer; all pre-norm with residuals.
pub fn st_block(tape: &mut Tape, store: &ParamStore, name: &str, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, t, h, w, d) = (s[0], s[1], s[2], s[3], s[4]);

    let n = nn::layer_norm(tape, store, &format!("{name}.ln_s"), x)?;
    let n = tape.reshape(n, &[b * t, h * w, d])?;
    let a = nn::attention(tape, store, &format!("{name}.attn_s"), n, n, heads, false)?;
    let a = tape.reshape(a, &s)?;
    let x = tape.add(x, a)?;

    let n = nn::layer_norm(tape, store, &format!("{name}.ln_t"), x)?;
    let n = tape.permute(n, &[0, 2, 3, 1, 4])?;
    let n = tape.reshape(n, &[b * h * w, t, d])?;
    let a = nn::attention(tape, store, &format!("{name}.attn_t"), n, n, heads, false)?;
    let a = tape.reshape(a, &[b, h, w, t, d])?;
    let a = tape.permute(a, &[0, 3, 1, 2, 4])?;
    let x = tape.add(x, a)?;

    let n = nn::layer_norm(tape, store, &format!("{name}.ln_f"), x)?;
    let f = nn::ffn(tape, store, &format!("{name}.ffn"), n)?;
    Ok(tape.add(x, f)?)
}

/// Learned temporal `[T,1,1,D]` and spatial `[H,W,D]` position tables.
pub fn init_positions(store: &mut ParamStore, name: &str, t: usize, h: usize, w: usize, d: usize, rng: &mut impl Rng) {
    store.insert(format!("{name}.pos_t"), nn::normal(&[t, 1, 1, d], 0.02, rng));
    store.insert(format!("{name}.pos_s"), nn::normal(&[h, w, d], 0.02, rng));
}

pub fn add_positions(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let pt = nn::param(tape, store, &format!("{name}.pos_t"))?;
    let ps = nn::param(tape, store, &format!("{name}.pos_s"))?;
    let x = tape.add_broadcast(x, pt)?;
    Ok(tape.add_broadcast(x, ps)?)
}
