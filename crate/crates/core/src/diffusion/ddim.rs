use serde::{Deserialize, Serialize};

use crate::diffusion::schedule::DiffusionSchedule;
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};

/// How one inversion step is solved.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inversion {
    /// Noise estimate taken at the less noisy end of the step.
    Explicit,
    /// Solves for the state whose sampling step lands on the input, so that
    /// sampling exactly undoes inversion.
    #[default]
    FixedPoint,
}

const MAX_FIXED_POINT_ITERS: usize = 200;

fn eps<D: Denoiser>(d: &D, xbar: &[f64], sigma: f64, cond: &D::Cond) -> Result<Vec<f64>> {
    let x0 = d.denoise(xbar, sigma, cond)?;
    if x0.len() != xbar.len() {
        return Err(Error::Shape(format!("denoiser returned {} values for {}", x0.len(), xbar.len())));
    }
    Ok(xbar.iter().zip(&x0).map(|(x, p)| (x - p) / sigma).collect())
}

/// `xbar_s -> xbar_{s-1}`.
fn sample_step<D: Denoiser>(d: &D, sched: &DiffusionSchedule, xbar: &[f64], cond: &D::Cond, s: usize) -> Result<Vec<f64>> {
    let (hi, lo) = (sched.sigma(s), sched.sigma(s - 1));
    let e = eps(d, xbar, hi, cond)?;
    Ok(xbar.iter().zip(&e).map(|(x, e)| x + (lo - hi) * e).collect())
}

/// `xbar_{s-1} -> xbar_s`.
fn invert_step<D: Denoiser>(
    d: &D,
    sched: &DiffusionSchedule,
    xbar: &[f64],
    cond: &D::Cond,
    s: usize,
    mode: Inversion,
) -> Result<Vec<f64>> {
    let (hi, lo) = (sched.sigma(s), sched.sigma(s - 1));
    let mut next: Vec<f64> = if lo == 0.0 {
        // the noise estimate at sigma 0 is undefined; start from the data point
        xbar.to_vec()
    } else {
        let e = eps(d, xbar, lo, cond)?;
        xbar.iter().zip(&e).map(|(x, e)| x + (hi - lo) * e).collect()
    };
    if mode == Inversion::Explicit && lo > 0.0 {
        return Ok(next);
    }
    let scale = xbar.iter().fold(hi, |m, v| m.max(v.abs()));
    let mut last = f64::INFINITY;
    for _ in 0..MAX_FIXED_POINT_ITERS {
        let e = eps(d, &next, hi, cond)?;
        let mut change = 0.0f64;
        for ((n, x), e) in next.iter_mut().zip(xbar).zip(&e) {
            let v = x + (hi - lo) * e;
            change = change.max((v - *n).abs());
            *n = v;
        }
        if change <= 1e-13 * scale {
            return Ok(next);
        }
        // a denoiser evaluated in f32 stalls at its rounding floor
        if change >= last {
            if change > 1e-4 * scale {
                log::warn!("inversion step {s} stalled with change {change:.3e}");
            }
            return Ok(next);
        }
        last = change;
    }
    log::warn!("inversion step {s} did not converge in {MAX_FIXED_POINT_ITERS} iterations");
    Ok(next)
}

fn check_len(x: &[f32], cond_len: Option<usize>) -> Result<()> {
    if x.is_empty() || cond_len.is_some_and(|n| n != x.len()) {
        return Err(Error::Shape("empty or mismatched diffusion state".into()));
    }
    Ok(())
}

/// Deterministic DDIM from `x` at `start_step` down to step 0.
///
/// `x` is in the usual scaled coordinates, `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) n`.
pub fn ddim_sample<D: Denoiser>(
    d: &D,
    sched: &DiffusionSchedule,
    x: &[f32],
    cond: &D::Cond,
    start_step: usize,
) -> Result<Vec<f32>> {
    check_len(x, None)?;
    if start_step > sched.num_steps() {
        return Err(Error::Range(format!(
            "start step {start_step} beyond {} schedule steps",
            sched.num_steps()
        )));
    }
    let k = sched.alpha(start_step).sqrt();
    let mut xbar: Vec<f64> = x.iter().map(|&v| v as f64 / k).collect();
    for s in (1..=start_step).rev() {
        xbar = sample_step(d, sched, &xbar, cond, s)?;
    }
    Ok(xbar.into_iter().map(|v| v as f32).collect())
}

/// Runs the deterministic update backwards for `delta_t` steps from a clean `x0`.
pub fn ddim_invert<D: Denoiser>(
    d: &D,
    sched: &DiffusionSchedule,
    x0: &[f32],
    cond: &D::Cond,
    delta_t: usize,
    mode: Inversion,
) -> Result<Vec<f32>> {
    check_len(x0, None)?;
    if delta_t > sched.num_steps() {
        return Err(Error::Range(format!(
            "delta T {delta_t} exceeds the {} schedule steps",
            sched.num_steps()
        )));
    }
    let mut xbar: Vec<f64> = x0.iter().map(|&v| v as f64).collect();
    for s in 1..=delta_t {
        xbar = invert_step(d, sched, &xbar, cond, s, mode)?;
    }
    let k = sched.alpha(delta_t).sqrt();
    Ok(xbar.into_iter().map(|v| (v * k) as f32).collect())
}

/// One sampling step `x_s -> x_{s-1}` in scaled coordinates, in f64.
pub fn sample_step_scaled<D: Denoiser>(
    d: &D,
    sched: &DiffusionSchedule,
    x: &[f64],
    cond: &D::Cond,
    s: usize,
) -> Result<Vec<f64>> {
    let k = sched.alpha(s).sqrt();
    let xbar: Vec<f64> = x.iter().map(|v| v / k).collect();
    let k1 = sched.alpha(s - 1).sqrt();
    Ok(sample_step(d, sched, &xbar, cond, s)?.into_iter().map(|v| v * k1).collect())
}

/// One inversion step `x_{s-1} -> x_s` in scaled coordinates, in f64.
pub fn invert_step_scaled<D: Denoiser>(
    d: &D,
    sched: &DiffusionSchedule,
    x: &[f64],
    cond: &D::Cond,
    s: usize,
    mode: Inversion,
) -> Result<Vec<f64>> {
    let k1 = sched.alpha(s - 1).sqrt();
    let xbar: Vec<f64> = x.iter().map(|v| v / k1).collect();
    let k = sched.alpha(s).sqrt();
    Ok(invert_step(d, sched, &xbar, cond, s, mode)?.into_iter().map(|v| v * k).collect())
}
