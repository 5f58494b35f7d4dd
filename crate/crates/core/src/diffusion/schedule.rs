use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// EDM noise-level distribution and data scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdmParams {
    pub logsigma_mean: f64,
    pub logsigma_std: f64,
    pub sigma_data: f64,
}

impl Default for EdmParams {
    fn default() -> Self {
        Self {
            logsigma_mean: 1.0,
            logsigma_std: 1.2,
            sigma_data: 0.5,
        }
    }
}

/// How the discrete linear-beta grid is built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub num_steps: usize,
    pub base_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub edm: EdmParams,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_steps: 50,
            base_steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            edm: EdmParams::default(),
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self)
    }
}

/// Cumulative `alpha_bar` per step with `alphas[0] = 1`, strictly decreasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    alphas: Vec<f64>,
    pub edm: EdmParams,
}

impl DiffusionSchedule {
    /// Linear betas over `base_steps`, subsampled evenly to `num_steps`.
    pub fn linear(cfg: &ScheduleConfig) -> Result<Self> {
        let (n, base) = (cfg.num_steps, cfg.base_steps);
        if n == 0 || base < n || !(0.0 < cfg.beta_start && cfg.beta_start <= cfg.beta_end && cfg.beta_end < 1.0) {
            return Err(Error::Config(format!(
                "invalid schedule: {n} of {base} steps, betas {}..{}",
                cfg.beta_start, cfg.beta_end
            )));
        }
        let mut cum = Vec::with_capacity(base + 1);
        cum.push(1.0f64);
        for i in 0..base {
            let frac = if base == 1 { 0.0 } else { i as f64 / (base - 1) as f64 };
            let beta = cfg.beta_start + (cfg.beta_end - cfg.beta_start) * frac;
            cum.push(cum[i] * (1.0 - beta));
        }
        let alphas = (0..=n).map(|k| cum[(k * base + n / 2) / n]).collect();
        Self::from_alphas(alphas, cfg.edm)
    }

    pub fn from_alphas(alphas: Vec<f64>, edm: EdmParams) -> Result<Self> {
        if alphas.len() < 2 || alphas[0] != 1.0 {
            return Err(Error::Config("schedule needs alpha_bar_0 = 1 and at least one step".into()));
        }
        for (i, w) in alphas.windows(2).enumerate() {
            if !(w[1] < w[0] && w[1] > 0.0) {
                return Err(Error::Config(format!(
                    "alpha_bar must decrease strictly inside (0, 1]: step {} has {} after {}",
                    i + 1,
                    w[1],
                    w[0]
                )));
            }
        }
        if !(edm.sigma_data > 0.0 && edm.logsigma_std > 0.0) {
            return Err(Error::Config("sigma_data and logsigma_std must be positive".into()));
        }
        Ok(Self { alphas, edm })
    }

    pub fn num_steps(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// Noise level of step `t` in variance-exploding coordinates, `sqrt(1/alpha_bar - 1)`.
    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 / self.alphas[t] - 1.0).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid() {
        let s = ScheduleConfig::default().build().unwrap();
        assert_eq!(s.num_steps(), 50);
        assert_eq!(s.alpha(0), 1.0);
        assert_eq!(s.sigma(0), 0.0);
        assert!(s.alpha(50) > 0.0 && s.alpha(50) < 1e-3);
    }

    #[test]
    fn rejects_non_monotone() {
        let e = DiffusionSchedule::from_alphas(vec![1.0, 0.5, 0.6], EdmParams::default());
        assert!(matches!(e, Err(Error::Config(_))));
    }
}
