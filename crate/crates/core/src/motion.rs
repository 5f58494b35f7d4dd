//! Macroblock motion estimation and the motion-field container.
//!
//! A vector `(dx, dy)` for the block at `(x0, y0)` in the current frame means
//! its best match in the previous frame sits at `(x0 - dx, y0 - dy)`, so a
//! scene translating right by 4 pixels yields `dx = +4`.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::video::{Clip, Luma};

pub const MVEC_MAGIC: &[u8; 4] = b"MVEC";
pub const MVEC_VERSION: u16 = 1;
const MVEC_HEADER: usize = 4 + 2 + 4 + 4 + 4 + 1;

pub const DEFAULT_BLOCK: usize = 16;
pub const DEFAULT_RANGE: i32 = 8;

/// Integer motion grid for one frame pair, row-major `hb x wb`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockMotion {
    pub hb: usize,
    pub wb: usize,
    pub vectors: Vec<(i32, i32)>,
}

#[allow(clippy::too_many_arguments)]
fn sad(prev: &Luma, cur: &Luma, x0: usize, y0: usize, dx: i32, dy: i32, block: usize, bound: u32) -> u32 {
    let mut total = 0u32;
    let w = cur.width;
    for r in 0..block {
        let cy = y0 + r;
        let py = (cy as i64 - dy as i64) as usize;
        let crow = &cur.data[cy * w + x0..cy * w + x0 + block];
        let px0 = (x0 as i64 - dx as i64) as usize;
        let prow = &prev.data[py * w + px0..py * w + px0 + block];
        total += crow
            .iter()
            .zip(prow)
            .map(|(&a, &b)| (a as i32 - b as i32).unsigned_abs())
            .sum::<u32>();
        if total > bound {
            return total;
        }
    }
    total
}

/// Candidate ordering: lower cost, then smaller `|dx|+|dy|`, then smaller `dy`, then smaller `dx`.
fn better(cost: u32, dx: i32, dy: i32, best: (u32, i32, i32)) -> bool {
    let key = (cost, dx.abs() + dy.abs(), dy, dx);
    let bk = (best.0, best.1.abs() + best.2.abs(), best.2, best.1);
    key < bk
}

/// Exhaustive SAD search over `[-range, range]^2` for every block of `cur`.
pub fn estimate_motion(prev: &Luma, cur: &Luma, block: usize, range: i32) -> Result<BlockMotion> {
    if prev.width != cur.width || prev.height != cur.height {
        return Err(Error::Size(format!(
            "frame sizes differ: {}x{} vs {}x{}",
            prev.height, prev.width, cur.height, cur.width
        )));
    }
    if block == 0 || cur.width < block || cur.height < block {
        return Err(Error::Size(format!(
            "frame {}x{} is smaller than one {block}x{block} block",
            cur.height, cur.width
        )));
    }
    if range < 0 {
        return Err(Error::Config(format!("search range {range} must be non-negative")));
    }
    let hb = cur.height / block;
    let wb = cur.width / block;
    let (w, h) = (cur.width as i64, cur.height as i64);
    let vectors = (0..hb * wb)
        .into_par_iter()
        .map(|bi| {
            let (by, bx) = (bi / wb, bi % wb);
            let (x0, y0) = (bx * block, by * block);
            let mut best = (u32::MAX, 0i32, 0i32);
            for dy in -range..=range {
                let py = y0 as i64 - dy as i64;
                if py < 0 || py + block as i64 > h {
                    continue;
                }
                for dx in -range..=range {
                    let px = x0 as i64 - dx as i64;
                    if px < 0 || px + block as i64 > w {
                        continue;
                    }
                    let cost = sad(prev, cur, x0, y0, dx, dy, block, best.0);
                    if better(cost, dx, dy, best) {
                        best = (cost, dx, dy);
                    }
                }
            }
            (best.1, best.2)
        })
        .collect();
    Ok(BlockMotion { hb, wb, vectors })
}

/// `T x Hb x Wb x 2` displacement grid, `(dx, dy)` per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionField {
    pub t: usize,
    pub hb: usize,
    pub wb: usize,
    pub vectors: Vec<f32>,
    pub normalized: bool,
    pub block_size: usize,
    pub search_range: i32,
}

impl MotionField {
    pub fn zeros(t: usize, hb: usize, wb: usize) -> Self {
        Self {
            t,
            hb,
            wb,
            vectors: vec![0.0; t * hb * wb * 2],
            normalized: true,
            block_size: DEFAULT_BLOCK,
            search_range: DEFAULT_RANGE,
        }
    }

    pub fn from_vectors(t: usize, hb: usize, wb: usize, vectors: Vec<f32>, normalized: bool) -> Result<Self> {
        if vectors.len() != t * hb * wb * 2 || t == 0 || hb == 0 || wb == 0 {
            return Err(Error::Shape(format!(
                "field {t}x{hb}x{wb}x2 needs {} values, got {}",
                t * hb * wb * 2,
                vectors.len()
            )));
        }
        Ok(Self {
            t,
            hb,
            wb,
            vectors,
            normalized,
            block_size: DEFAULT_BLOCK,
            search_range: DEFAULT_RANGE,
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.t, self.hb, self.wb, 2]
    }

    pub fn get(&self, t: usize, y: usize, x: usize) -> (f32, f32) {
        let o = ((t * self.hb + y) * self.wb + x) * 2;
        (self.vectors[o], self.vectors[o + 1])
    }

    /// Divides `dx` by `width` and `dy` by `height`.
    pub fn normalize(&self, width: usize, height: usize) -> Result<MotionField> {
        if self.normalized {
            return Err(Error::Contract("motion field is already normalized".into()));
        }
        let (sx, sy) = (width as f32, height as f32);
        let mut out = self.clone();
        for v in out.vectors.chunks_mut(2) {
            v[0] /= sx;
            v[1] /= sy;
        }
        out.normalized = true;
        Ok(out)
    }

    pub fn denormalize(&self, width: usize, height: usize) -> Result<MotionField> {
        if !self.normalized {
            return Err(Error::Contract("motion field is not normalized".into()));
        }
        let (sx, sy) = (width as f32, height as f32);
        let mut out = self.clone();
        for v in out.vectors.chunks_mut(2) {
            v[0] *= sx;
            v[1] *= sy;
        }
        out.normalized = false;
        Ok(out)
    }

    /// Nearest-neighbour spatial resize; the temporal axis is untouched.
    pub fn resize(&self, target_h: usize, target_w: usize) -> Result<Resized> {
        if !self.normalized {
            return Err(Error::Contract("resize expects a normalized field".into()));
        }
        if target_h == 0 || target_w == 0 {
            return Err(Error::Shape("resize target must be non-empty".into()));
        }
        let warning = (target_h > 4 * self.hb || target_w > 4 * self.wb).then(|| {
            let msg = format!(
                "upscaling motion grid {}x{} to {target_h}x{target_w} (more than 4x)",
                self.hb, self.wb
            );
            log::warn!("{msg}");
            msg
        });
        let mut vectors = Vec::with_capacity(self.t * target_h * target_w * 2);
        for t in 0..self.t {
            for y in 0..target_h {
                let sy = y * self.hb / target_h;
                for x in 0..target_w {
                    let sx = x * self.wb / target_w;
                    let (dx, dy) = self.get(t, sy, sx);
                    vectors.push(dx);
                    vectors.push(dy);
                }
            }
        }
        Ok(Resized {
            field: MotionField {
                hb: target_h,
                wb: target_w,
                vectors,
                ..self.clone()
            },
            warning,
        })
    }

    /// First invariant violation, if any.
    pub fn check(&self) -> Option<String> {
        for (i, v) in self.vectors.iter().enumerate() {
            let cell = i / 2;
            let (t, rest) = (cell / (self.hb * self.wb), cell % (self.hb * self.wb));
            let at = format!("t={t} y={} x={} {}", rest / self.wb, rest % self.wb, ["dx", "dy"][i % 2]);
            if !v.is_finite() {
                return Some(format!("non-finite component at {at}"));
            }
            if self.normalized && v.abs() > 1.0 {
                return Some(format!("normalized component {v} outside [-1, 1] at {at}"));
            }
            if !self.normalized && v.abs() > self.search_range as f32 {
                return Some(format!("raw component {v} exceeds search range {} at {at}", self.search_range));
            }
        }
        None
    }
}

#[derive(Debug, Clone)]
pub struct Resized {
    pub field: MotionField,
    pub warning: Option<String>,
}

/// Raw motion for every frame of a clip; frame `t` is matched against frame `t-1`
/// and the first frame against the keyframe.
pub fn clip_motion(clip: &Clip, block: usize, range: i32) -> Result<MotionField> {
    let mut prev = clip.keyframe.luma();
    let mut vectors = Vec::new();
    let (mut hb, mut wb) = (0, 0);
    for f in &clip.frames {
        let cur = f.luma();
        let m = estimate_motion(&prev, &cur, block, range)?;
        hb = m.hb;
        wb = m.wb;
        for (dx, dy) in m.vectors {
            vectors.push(dx as f32);
            vectors.push(dy as f32);
        }
        prev = cur;
    }
    let mut field = MotionField::from_vectors(clip.frames.len(), hb, wb, vectors, false)?;
    field.block_size = block;
    field.search_range = range;
    Ok(field)
}

pub fn write_mvec(f: &MotionField) -> Vec<u8> {
    let mut out = Vec::with_capacity(MVEC_HEADER + f.vectors.len() * 4);
    out.extend_from_slice(MVEC_MAGIC);
    out.extend_from_slice(&MVEC_VERSION.to_le_bytes());
    out.extend_from_slice(&(f.t as u32).to_le_bytes());
    out.extend_from_slice(&(f.hb as u32).to_le_bytes());
    out.extend_from_slice(&(f.wb as u32).to_le_bytes());
    out.push(f.normalized as u8);
    for v in &f.vectors {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_mvec(bytes: &[u8]) -> Result<MotionField> {
    if bytes.len() < 4 || &bytes[..4] != MVEC_MAGIC {
        return Err(Error::Format("bad magic, expected \"MVEC\"".into()));
    }
    if bytes.len() < MVEC_HEADER {
        return Err(Error::Truncated {
            what: "MVEC header".into(),
            expected: MVEC_HEADER,
            actual: bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != MVEC_VERSION {
        return Err(Error::Format(format!("unsupported MVEC version {version}")));
    }
    let rd = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (t, hb, wb) = (rd(6), rd(10), rd(14));
    let flags = bytes[18];
    if flags & !1 != 0 {
        return Err(Error::Format(format!("unknown MVEC flags {flags:#04x}")));
    }
    let n = t
        .checked_mul(hb)
        .and_then(|v| v.checked_mul(wb))
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| Error::Format("declared field size overflows".into()))?;
    let payload = bytes.len() - MVEC_HEADER;
    if payload != n {
        if payload < n {
            return Err(Error::Truncated {
                what: "MVEC payload".into(),
                expected: n,
                actual: payload,
            });
        }
        return Err(Error::Format(format!("{} trailing bytes", payload - n)));
    }
    let vectors = bytes[MVEC_HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    MotionField::from_vectors(t, hb, wb, vectors, flags & 1 == 1)
}

pub fn load_mvec(path: &Path) -> Result<MotionField> {
    read_mvec(&std::fs::read(path)?)
}

pub fn save_mvec(path: &Path, f: &MotionField) -> Result<()> {
    std::fs::write(path, write_mvec(f))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(w: usize, h: usize, f: impl Fn(usize, usize) -> u8) -> Luma {
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                data.push(f(x, y));
            }
        }
        Luma { width: w, height: h, data }
    }

    #[test]
    fn identical_frames_give_zero() {
        let a = plane(32, 32, |_, _| 7);
        let m = estimate_motion(&a, &a, 16, 8).unwrap();
        assert!(m.vectors.iter().all(|&v| v == (0, 0)));
    }

    #[test]
    fn too_small_frame() {
        let a = plane(8, 20, |_, _| 0);
        assert!(matches!(estimate_motion(&a, &a, 16, 8), Err(Error::Size(_))));
    }

    #[test]
    fn tie_order() {
        // equal cost: (1,0) and (0,1) and (-1,0) and (0,-1); smallest dy first then dx
        assert!(better(5, 0, -1, (5, -1, 0)));
        assert!(better(5, -1, 0, (5, 1, 0)));
        assert!(!better(5, 1, 1, (5, 0, 1)));
    }

    #[test]
    fn normalize_arithmetic() {
        let f = MotionField::from_vectors(1, 1, 1, vec![16.0, -16.0], false).unwrap();
        let n = f.normalize(64, 64).unwrap();
        assert_eq!(n.vectors, vec![0.25, -0.25]);
        assert!(n.normalize(64, 64).is_err());
    }

    #[test]
    fn resize_doubling() {
        let vals: Vec<f32> = (0..10 * 18 * 2).map(|i| (i as f32) / 1000.0).collect();
        let f = MotionField::from_vectors(1, 10, 18, vals, true).unwrap();
        let r = f.resize(20, 36).unwrap();
        assert!(r.warning.is_none());
        for y in 0..20 {
            for x in 0..36 {
                assert_eq!(r.field.get(0, y, x), f.get(0, y / 2, x / 2));
            }
        }
        assert!(f.resize(41, 36).unwrap().warning.is_some());
    }
}
