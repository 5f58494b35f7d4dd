use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffusion::ddim::{ddim_invert, ddim_sample, Inversion};
use crate::diffusion::schedule::DiffusionSchedule;
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::motion::MotionField;

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedClip {
    /// `[frame_len]` latent.
    pub keyframe: Vec<f32>,
    /// `[T, frame_len]` latents.
    pub frames: Vec<f32>,
}

impl DecodedClip {
    pub fn last_frame(&self, frame_len: usize) -> &[f32] {
        &self.frames[self.frames.len() - frame_len..]
    }
}

/// Decodes clips in order, chaining keyframes through inversion.
///
/// Clip 0's keyframe is sampled from noise by `gi`. For clip `r > 0` the last
/// decoded frame of clip `r-1` is inverted `delta_t` steps under clip `r-1`'s
/// keyframe condition, and sampling under clip `r`'s condition starts from
/// there. Frames are then sampled by `gv` with the condition `make_cond`
/// builds from the decoded keyframe and the clip's motion.
#[allow(clippy::too_many_arguments)]
pub fn decode_long<GI, GV, F>(
    gi: &GI,
    gv: &GV,
    sched: &DiffusionSchedule,
    clips: &[(GI::Cond, MotionField)],
    make_cond: F,
    frame_len: usize,
    delta_t: usize,
    mode: Inversion,
    rng: &mut impl Rng,
) -> Result<Vec<DecodedClip>>
where
    GI: Denoiser,
    GV: Denoiser,
    F: Fn(&[f32], &MotionField) -> Result<GV::Cond>,
{
    if clips.is_empty() {
        return Err(Error::Contract("nothing to decode".into()));
    }
    if delta_t > sched.num_steps() {
        return Err(Error::Range(format!(
            "delta T {delta_t} exceeds the {} schedule steps",
            sched.num_steps()
        )));
    }
    let n = sched.num_steps();
    let mut out: Vec<DecodedClip> = Vec::with_capacity(clips.len());
    for (r, (kcond, field)) in clips.iter().enumerate() {
        if field.t == 0 {
            return Err(Error::Shape(format!("clip {r} has no frames")));
        }
        // both noise draws happen for every clip so the stream does not depend on delta_t
        let key_noise: Vec<f32> = (0..frame_len).map(|_| StandardNormal.sample(rng)).collect();
        let vid_noise: Vec<f32> = (0..field.t * frame_len).map(|_| StandardNormal.sample(rng)).collect();
        let keyframe = match out.last() {
            None => ddim_sample(gi, sched, &key_noise, kcond, n)?,
            Some(prev) => {
                let x = ddim_invert(gi, sched, prev.last_frame(frame_len), &clips[r - 1].0, delta_t, mode)?;
                ddim_sample(gi, sched, &x, kcond, delta_t)?
            }
        };
        let vcond = make_cond(&keyframe, field)?;
        let frames = ddim_sample(gv, sched, &vid_noise, &vcond, n)?;
        if frames.len() != field.t * frame_len {
            return Err(Error::Shape(format!("video denoiser produced {} values", frames.len())));
        }
        out.push(DecodedClip { keyframe, frames });
    }
    Ok(out)
}
