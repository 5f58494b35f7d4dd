//! Finite-difference verification of tape gradients.

use crate::nn::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Step size for the difference stencil.
    pub h: f32,
    /// Use the 4th-order five-point stencil instead of plain central differences.
    pub five_point: bool,
    pub rel_tol: f64,
    /// Absolute error below which a tensor passes regardless of its relative error.
    pub abs_floor: f64,
    /// Multiplier on the estimated f32 roundoff of the stencil; the absolute
    /// error is also accepted below this noise level.
    pub noise_mult: f64,
    /// Extra step sizes tried on a failing tensor.
    pub retries: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 3e-3,
            five_point: true,
            rel_tol: 1e-3,
            abs_floor: 1e-6,
            noise_mult: 4.0,
            retries: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub numel: usize,
    /// Step size the reported numbers come from.
    pub h: f32,
    /// `||g - fd|| / max(||g||, ||fd||)`
    pub rel_err: f64,
    pub abs_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn failures(&self) -> Vec<&TensorCheck> {
        self.tensors.iter().filter(|t| !t.passed).collect()
    }
}

fn eval<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    Ok(tape.value(loss).data()[0] as f64)
}

fn measure<F>(f: &F, work: &mut ParamStore, name: &str, analytic: &[f32], h: f32, cfg: &GradCheckConfig, base: f64) -> Result<TensorCheck>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let n = analytic.len();
    let mut numeric = vec![0.0f64; n];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let orig = work.get(name)?.data()[i];
        let mut at = |delta: f32| -> Result<f64> {
            work.get_mut(name).unwrap().data_mut()[i] = orig + delta;
            eval(f, work)
        };
        *slot = if cfg.five_point {
            let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
            (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h as f64)
        } else {
            (at(h)? - at(-h)?) / (2.0 * h as f64)
        };
        work.get_mut(name).unwrap().data_mut()[i] = orig;
    }
    let mut diff = 0.0f64;
    let mut ng = 0.0f64;
    let mut nf = 0.0f64;
    for (a, b) in analytic.iter().zip(&numeric) {
        diff += (*a as f64 - b).powi(2);
        ng += (*a as f64).powi(2);
        nf += b * b;
    }
    let abs_err = diff.sqrt();
    let denom = ng.sqrt().max(nf.sqrt());
    let rel_err = if denom > 0.0 { abs_err / denom } else { 0.0 };
    // |stencil weights| / denominator: 18/12 for five points, 2/2 for central
    let spread = if cfg.five_point { 1.5 } else { 1.0 };
    let noise = cfg.noise_mult * f32::EPSILON as f64 * base * spread * (n as f64).sqrt() / h as f64;
    Ok(TensorCheck {
        name: name.to_string(),
        numel: n,
        h,
        rel_err,
        abs_err,
        passed: rel_err <= cfg.rel_tol || abs_err <= cfg.abs_floor.max(noise),
    })
}

/// Compares the analytic gradient of `f` with finite differences for every
/// element of every parameter in `store`. A tensor that fails at `cfg.h` is
/// retried at `h/3, 3h, h/9, 9h, ...` (up to `cfg.retries` extra steps) and
/// keeps its best result.
pub fn check<F>(f: F, store: &ParamStore, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let base = tape.value(loss).data()[0].abs().max(1.0) as f64;
    let grads = tape.backward(loss)?;
    let mut work = store.clone();
    let mut tensors = Vec::new();
    for name in store.names() {
        let analytic = grads
            .param(&name)
            .map(|t| t.into_data())
            .unwrap_or_else(|| vec![0.0; store.get(&name).unwrap().numel()]);
        let mut best = measure(&f, &mut work, &name, &analytic, cfg.h, &cfg, base)?;
        for k in 0..cfg.retries {
            if best.passed {
                break;
            }
            let scale = 3f32.powi(k as i32 / 2 + 1);
            let h = if k % 2 == 0 { cfg.h / scale } else { cfg.h * scale };
            let next = measure(&f, &mut work, &name, &analytic, h, &cfg, base)?;
            if next.passed || next.rel_err < best.rel_err {
                best = next;
            }
        }
        tensors.push(best);
    }
    Ok(GradCheckReport { tensors })
}
