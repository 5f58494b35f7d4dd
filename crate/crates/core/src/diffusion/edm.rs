use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diffusion::schedule::EdmParams;
use crate::diffusion::Denoiser;
use crate::error::Result;

/// `sigma` with `ln sigma ~ N(logsigma_mean, logsigma_std^2)`.
pub fn sample_sigma(edm: &EdmParams, rng: &mut impl Rng) -> f64 {
    let n = Normal::new(edm.logsigma_mean, edm.logsigma_std).expect("validated std");
    n.sample(rng).exp()
}

/// Loss weight `(sigma^2 + sd^2) / (sigma * sd)^2`.
pub fn loss_weight(sigma: f64, sigma_data: f64) -> f64 {
    assert!(sigma > 0.0, "noise level must be positive");
    (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data).powi(2)
}

/// Network preconditioning: `D(x) = c_skip x + c_out F(c_in x, c_noise)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Precond {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

pub fn precond(sigma: f64, sigma_data: f64) -> Precond {
    let (s2, d2) = (sigma * sigma, sigma_data * sigma_data);
    Precond {
        c_skip: d2 / (s2 + d2),
        c_out: sigma * sigma_data / (s2 + d2).sqrt(),
        c_in: 1.0 / (s2 + d2).sqrt(),
        c_noise: sigma.ln() / 4.0,
    }
}

/// One Monte-Carlo draw of the weighted denoising loss, averaged over elements.
pub fn edm_loss<D: Denoiser>(d: &D, edm: &EdmParams, x0: &[f32], cond: &D::Cond, rng: &mut impl Rng) -> Result<f64> {
    let sigma = sample_sigma(edm, rng);
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let noisy: Vec<f64> = x0.iter().map(|&v| v as f64 + normal.sample(rng)).collect();
    let pred = d.denoise(&noisy, sigma, cond)?;
    let w = loss_weight(sigma, edm.sigma_data);
    let se: f64 = pred.iter().zip(x0).map(|(p, &x)| (p - x as f64).powi(2)).sum();
    Ok(w * se / x0.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_at_sigma_data() {
        assert!((loss_weight(0.5, 0.5) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn precond_unit_variance() {
        // c_in scales x0 + n (variance sd^2 + sigma^2) to unit variance
        let p = precond(2.0, 0.5);
        assert!((p.c_in * (4.25f64).sqrt() - 1.0).abs() < 1e-12);
        assert!((p.c_skip - 0.25 / 4.25).abs() < 1e-12);
    }
}
