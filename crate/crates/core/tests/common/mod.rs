//! Independent reference implementations and generators shared by the integration tests.
#![allow(dead_code)]

use motok::motion::MotionField;
use motok::sequence::{build_sequence, ClipTokens, Order, Pair, TokenSequence, UnifiedVocab};
use motok::video::{Frame, Luma, RawVideo};
use motok_tensor::Tensor;
use rand::Rng;

/// Exhaustive block matching written from the definition: full SAD, every
/// in-bounds displacement, lexicographic key (cost, |dx|+|dy|, dy, dx).
pub fn brute_motion(prev: &Luma, cur: &Luma, block: usize, range: i32) -> (usize, usize, Vec<(i32, i32)>) {
    let (hb, wb) = (cur.height / block, cur.width / block);
    let mut out = Vec::new();
    for by in 0..hb {
        for bx in 0..wb {
            let mut cands = Vec::new();
            for dy in -range..=range {
                for dx in -range..=range {
                    let px = (bx * block) as i64 - dx as i64;
                    let py = (by * block) as i64 - dy as i64;
                    if px < 0 || py < 0 || px + block as i64 > cur.width as i64 || py + block as i64 > cur.height as i64 {
                        continue;
                    }
                    let mut cost = 0u64;
                    for r in 0..block {
                        for c in 0..block {
                            let a = cur.at(by * block + r, bx * block + c) as i64;
                            let b = prev.at(py as usize + r, px as usize + c) as i64;
                            cost += (a - b).unsigned_abs();
                        }
                    }
                    cands.push((cost, dx.abs() + dy.abs(), dy, dx));
                }
            }
            let best = cands.into_iter().min().expect("zero displacement is always in bounds");
            out.push((best.3, best.2));
        }
    }
    (hb, wb, out)
}

/// Argmin of squared distance between L2-normalized vectors; first index wins ties.
pub fn brute_quantize(codes: &[f32], d: usize, z: &[f32]) -> usize {
    let unit = |v: &[f32]| {
        let n = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        v.iter().map(|&x| x as f64 / n).collect::<Vec<f64>>()
    };
    let zu = unit(z);
    let mut best = (f64::INFINITY, 0);
    for (k, c) in codes.chunks(d).enumerate() {
        let cu = unit(c);
        let dist: f64 = cu.iter().zip(&zu).map(|(a, b)| (a - b).powi(2)).sum();
        if dist < best.0 {
            best = (dist, k);
        }
    }
    best.1
}

pub fn random_luma(w: usize, h: usize, rng: &mut impl Rng) -> Luma {
    Luma {
        width: w,
        height: h,
        data: (0..w * h).map(|_| rng.random()).collect(),
    }
}

/// `prev` translated by `(sx, sy)` with edge clamping, plus uniform noise of `±noise`.
pub fn shifted(prev: &Luma, sx: i32, sy: i32, noise: u8, rng: &mut impl Rng) -> Luma {
    let mut data = Vec::with_capacity(prev.data.len());
    for y in 0..prev.height as i32 {
        for x in 0..prev.width as i32 {
            let px = (x - sx).clamp(0, prev.width as i32 - 1) as usize;
            let py = (y - sy).clamp(0, prev.height as i32 - 1) as usize;
            let v = prev.at(py, px) as i32 + rng.random_range(-(noise as i32)..=noise as i32);
            data.push(v.clamp(0, 255) as u8);
        }
    }
    Luma {
        width: prev.width,
        height: prev.height,
        data,
    }
}

pub fn random_video(rng: &mut impl Rng) -> RawVideo {
    let (w, h) = (rng.random_range(1..=12), rng.random_range(1..=12));
    let c = [1, 3][rng.random_range(0..2)];
    let frames = (0..rng.random_range(1..=4))
        .map(|_| Frame::new(w, h, c, (0..w * h * c).map(|_| rng.random()).collect()).unwrap())
        .collect();
    RawVideo::new(rng.random_range(1..=120), rng.random_range(1..=1001), frames).unwrap()
}

pub fn random_field(rng: &mut impl Rng) -> MotionField {
    let (t, hb, wb) = (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=6));
    let normalized = rng.random_bool(0.5);
    let vectors = (0..t * hb * wb * 2)
        .map(|_| {
            if normalized {
                rng.random_range(-1.0f32..=1.0)
            } else {
                rng.random_range(-8i32..=8) as f32
            }
        })
        .collect();
    MotionField::from_vectors(t, hb, wb, vectors, normalized).unwrap()
}

pub fn random_vocab(rng: &mut impl Rng) -> UnifiedVocab {
    UnifiedVocab::new(rng.random_range(1..=300), rng.random_range(1..=300), rng.random_range(1..=2000)).unwrap()
}

/// A builder-made sequence with 0..3 pairs of random text and clips.
pub fn random_sequence(vocab: &UnifiedVocab, rng: &mut impl Rng) -> TokenSequence {
    let pairs: Vec<Pair> = (0..rng.random_range(0..=3))
        .map(|_| Pair {
            text: (0..rng.random_range(0..=5))
                .map(|_| vocab.text_id(rng.random_range(0..vocab.text_size as usize)).unwrap())
                .collect(),
            clips: (0..rng.random_range(0..=2))
                .map(|_| ClipTokens {
                    visual: (0..rng.random_range(1..=6))
                        .map(|_| vocab.visual_id(rng.random_range(0..vocab.visual_size as usize)).unwrap())
                        .collect(),
                    motion: (0..rng.random_range(1..=6))
                        .map(|_| vocab.motion_id(rng.random_range(0..vocab.motion_size as usize)).unwrap())
                        .collect(),
                })
                .collect(),
        })
        .collect();
    let order = if rng.random_bool(0.5) { Order::TextFirst } else { Order::MediaFirst };
    build_sequence(vocab, &pairs, order).unwrap()
}

pub fn random_tensors(rng: &mut impl Rng) -> Vec<(String, Tensor)> {
    (0..rng.random_range(0..=5))
        .map(|i| {
            let rank = rng.random_range(1..=3);
            let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=4)).collect();
            let n = shape.iter().product();
            let data = (0..n)
                .map(|_| match rng.random_range(0..10) {
                    0 => -0.0,
                    1 => f32::MAX,
                    _ => rng.random_range(-1e3f32..1e3),
                })
                .collect();
            (format!("t{i}.{}", rng.random_range(0..1000)), Tensor::new(&shape, data).unwrap())
        })
        .collect()
}
