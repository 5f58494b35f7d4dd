//! Synthetic videos and motion fields for tests, examples and desk-scale training.

use rand::Rng;

use crate::motion::MotionField;
use crate::video::{Frame, RawVideo};

/// Pixel value of the gradient test video.
pub fn gradient_pixel(t: usize, y: usize, x: usize, c: usize) -> u8 {
    ((x * 3 + y * 5 + t * 7 + c * 50) % 256) as u8
}

pub fn gradient_video(width: usize, height: usize, channels: usize, frames: usize, fps: u32) -> RawVideo {
    let frames = (0..frames)
        .map(|t| {
            let mut data = Vec::with_capacity(width * height * channels);
            for y in 0..height {
                for x in 0..width {
                    for c in 0..channels {
                        data.push(gradient_pixel(t, y, x, c));
                    }
                }
            }
            Frame::new(width, height, channels, data).unwrap()
        })
        .collect();
    RawVideo::new(fps, 1, frames).unwrap()
}

/// A textured square moving at constant velocity over a flat background.
#[derive(Debug, Clone)]
pub struct MovingSquare {
    pub width: usize,
    pub height: usize,
    pub size: usize,
    pub start: (i64, i64),
    pub velocity: (i64, i64),
    pub background: u8,
    /// Per-pixel texture of the square, `size * size` values.
    pub texture: Vec<u8>,
}

impl MovingSquare {
    pub fn textured(width: usize, height: usize, size: usize, start: (i64, i64), velocity: (i64, i64), rng: &mut impl Rng) -> Self {
        let texture = (0..size * size).map(|_| rng.random_range(96..=255)).collect();
        Self {
            width,
            height,
            size,
            start,
            velocity,
            background: 16,
            texture,
        }
    }

    pub fn flat(width: usize, height: usize, size: usize, start: (i64, i64), velocity: (i64, i64), level: u8) -> Self {
        Self {
            width,
            height,
            size,
            start,
            velocity,
            background: 32,
            texture: vec![level; size * size],
        }
    }

    pub fn position(&self, t: usize) -> (i64, i64) {
        (self.start.0 + self.velocity.0 * t as i64, self.start.1 + self.velocity.1 * t as i64)
    }

    pub fn frame(&self, t: usize) -> Frame {
        let (sx, sy) = self.position(t);
        let mut data = vec![self.background; self.width * self.height];
        for r in 0..self.size {
            for c in 0..self.size {
                let (x, y) = (sx + c as i64, sy + r as i64);
                if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
                    data[y as usize * self.width + x as usize] = self.texture[r * self.size + c];
                }
            }
        }
        Frame::new(self.width, self.height, 1, data).unwrap()
    }

    pub fn video(&self, frames: usize, fps: u32) -> RawVideo {
        RawVideo::new(fps, 1, (0..frames).map(|t| self.frame(t)).collect()).unwrap()
    }
}

/// Families of smooth normalized motion fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Constant,
    Ramp,
    Rotation,
}

/// Random field of one family with components inside `[-amp, amp]`.
pub fn motion_field(kind: FieldKind, t: usize, h: usize, w: usize, amp: f32, rng: &mut impl Rng) -> MotionField {
    let mut v = Vec::with_capacity(t * h * w * 2);
    let u = |rng: &mut dyn rand::RngCore| rng.random_range(-1.0f32..1.0);
    match kind {
        FieldKind::Constant => {
            let (a, b) = (u(rng) * amp, u(rng) * amp);
            for _ in 0..t * h * w {
                v.push(a);
                v.push(b);
            }
        }
        FieldKind::Ramp => {
            // affine in (x, y, t) with coefficients kept inside the amplitude
            let c: Vec<f32> = (0..8).map(|_| u(rng)).collect();
            for ti in 0..t {
                let tt = coord(ti, t);
                for yi in 0..h {
                    let yy = coord(yi, h);
                    for xi in 0..w {
                        let xx = coord(xi, w);
                        let dx = (c[0] + c[1] * xx + c[2] * yy + c[3] * tt) / 4.0;
                        let dy = (c[4] + c[5] * xx + c[6] * yy + c[7] * tt) / 4.0;
                        v.push(dx * amp);
                        v.push(dy * amp);
                    }
                }
            }
        }
        FieldKind::Rotation => {
            let omega = u(rng);
            let accel = u(rng) * 0.5;
            let (cx, cy) = (u(rng) * 0.3, u(rng) * 0.3);
            for ti in 0..t {
                let om = (omega + accel * coord(ti, t)) / 2.3;
                for yi in 0..h {
                    let yy = coord(yi, h) - cy;
                    for xi in 0..w {
                        let xx = coord(xi, w) - cx;
                        v.push(-om * yy * amp);
                        v.push(om * xx * amp);
                    }
                }
            }
        }
    }
    MotionField::from_vectors(t, h, w, v, true).unwrap()
}

fn coord(i: usize, n: usize) -> f32 {
    if n == 1 {
        0.0
    } else {
        2.0 * i as f32 / (n - 1) as f32 - 1.0
    }
}

/// Cycles through the three families.
pub fn mixed_fields(n: usize, t: usize, h: usize, w: usize, amp: f32, rng: &mut impl Rng) -> Vec<MotionField> {
    let kinds = [FieldKind::Constant, FieldKind::Ramp, FieldKind::Rotation];
    (0..n).map(|i| motion_field(kinds[i % 3], t, h, w, amp, rng)).collect()
}

/// Two-state Markov chain over `symbols`; `p` = P(0 -> 1), `q` = P(1 -> 0).
pub fn markov_sequence(len: usize, p: f64, q: f64, symbols: [u32; 2], rng: &mut impl Rng) -> Vec<u32> {
    let stationary_one = p / (p + q);
    let mut s = usize::from(rng.random_bool(stationary_one));
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(symbols[s]);
        let flip = if s == 0 { p } else { q };
        if rng.random_bool(flip) {
            s ^= 1;
        }
    }
    out
}

/// Entropy rate in nats of the chain above.
pub fn markov_entropy_rate(p: f64, q: f64) -> f64 {
    let h = |x: f64| -(x * x.ln() + (1.0 - x) * (1.0 - x).ln());
    let pi0 = q / (p + q);
    pi0 * h(p) + (1.0 - pi0) * h(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fields_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for f in mixed_fields(30, 4, 8, 8, 0.9, &mut rng) {
            assert!(f.check().is_none());
        }
    }

    #[test]
    fn entropy_rate_value() {
        let h = markov_entropy_rate(0.1, 0.3);
        assert!((h - 0.3967).abs() < 1e-3, "{h}");
    }
}
