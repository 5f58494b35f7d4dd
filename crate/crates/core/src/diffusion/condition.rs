use crate::error::{Error, Result};
use crate::motion::MotionField;

/// Everything the video denoiser is conditioned on, at latent resolution.
///
/// The motion features that the denoiser cross-attends to are computed from
/// `motion` by the denoiser's own conditioning encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionPack {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    /// Keyframe latent repeated `t` times, `[T, H, W, C]`.
    pub keyframe: Vec<f32>,
    /// Normalized motion resized to the latent grid, `[T, H, W, 2]`.
    pub motion: Vec<f32>,
}

/// Tiles the keyframe latent `[H, W, C]` over `t` frames and resizes motion to `H x W`.
pub fn build_condition(keyframe_latent: &[f32], dims: (usize, usize, usize), motion: &MotionField, t: usize) -> Result<ConditionPack> {
    let (h, w, c) = dims;
    if keyframe_latent.len() != h * w * c {
        return Err(Error::Shape(format!(
            "keyframe latent of {} values for {h}x{w}x{c}",
            keyframe_latent.len()
        )));
    }
    if motion.t != t {
        return Err(Error::Shape(format!("motion covers {} frames, clip has {t}", motion.t)));
    }
    let field = if motion.hb == h && motion.wb == w {
        motion.clone()
    } else {
        motion.resize(h, w)?.field
    };
    if !field.normalized {
        return Err(Error::Contract("conditioning motion must be normalized".into()));
    }
    Ok(ConditionPack {
        t,
        h,
        w,
        c,
        keyframe: keyframe_latent.repeat(t),
        motion: field.vectors,
    })
}

impl ConditionPack {
    /// Channels of the assembled input: noisy, keyframe, motion.
    pub fn input_channels(&self) -> usize {
        2 * self.c + 2
    }

    pub fn numel(&self) -> usize {
        self.t * self.h * self.w * self.c
    }

    /// Channel-wise concatenation `[noisy, keyframe, motion]`, `[T, H, W, 2C+2]`.
    pub fn assemble(&self, noisy: &[f32]) -> Result<Vec<f32>> {
        if noisy.len() != self.numel() {
            return Err(Error::Shape(format!("noisy input of {} for {} latent values", noisy.len(), self.numel())));
        }
        let c = self.c;
        let mut out = Vec::with_capacity(self.t * self.h * self.w * self.input_channels());
        for i in 0..self.t * self.h * self.w {
            out.extend_from_slice(&noisy[i * c..(i + 1) * c]);
            out.extend_from_slice(&self.keyframe[i * c..(i + 1) * c]);
            out.extend_from_slice(&self.motion[i * 2..i * 2 + 2]);
        }
        Ok(out)
    }

    /// Same pack with the motion ablated to zero.
    pub fn without_motion(&self) -> Self {
        Self {
            motion: vec![0.0; self.motion.len()],
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_frame_pack() {
        let m = MotionField::zeros(1, 2, 2);
        let p = build_condition(&[0.5; 4], (2, 2, 1), &m, 1).unwrap();
        assert_eq!(p.keyframe, vec![0.5; 4]);
        assert_eq!(p.input_channels(), 4);
        assert_eq!(p.assemble(&[1.0; 4]).unwrap()[..4], [1.0, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn temporal_mismatch() {
        let m = MotionField::zeros(3, 2, 2);
        assert!(matches!(build_condition(&[0.0; 4], (2, 2, 1), &m, 2), Err(Error::Shape(_))));
    }
}
