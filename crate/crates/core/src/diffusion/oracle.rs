use serde::{Deserialize, Serialize};

use crate::diffusion::Denoiser;
use crate::error::{Error, Result};

/// Posterior mean for data `x0 ~ N(m, diag(var))` where `m = mean + cond_weight * cond`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearGaussianOracle {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub cond_weight: f64,
}

impl LinearGaussianOracle {
    pub fn new(mean: Vec<f64>, var: Vec<f64>, cond_weight: f64) -> Result<Self> {
        if mean.len() != var.len() || mean.is_empty() {
            return Err(Error::Shape(format!("mean of {} with variance of {}", mean.len(), var.len())));
        }
        if var.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Config("oracle variances must be positive and finite".into()));
        }
        Ok(Self { mean, var, cond_weight })
    }

    pub fn isotropic(n: usize, var: f64, cond_weight: f64) -> Result<Self> {
        Self::new(vec![0.0; n], vec![var; n], cond_weight)
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Prior mean under a condition (an empty condition counts as zero).
    pub fn center(&self, cond: &[f32]) -> Result<Vec<f64>> {
        if !cond.is_empty() && cond.len() != self.len() {
            return Err(Error::Shape(format!("condition of {} for oracle of {}", cond.len(), self.len())));
        }
        Ok(self
            .mean
            .iter()
            .enumerate()
            .map(|(i, m)| m + self.cond_weight * cond.get(i).map_or(0.0, |&c| c as f64))
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let o: Self = serde_json::from_str(s)?;
        Self::new(o.mean, o.var, o.cond_weight)
    }
}

impl Denoiser for LinearGaussianOracle {
    type Cond = Vec<f32>;

    fn denoise(&self, x: &[f64], sigma: f64, cond: &Vec<f32>) -> Result<Vec<f64>> {
        if x.len() != self.len() {
            return Err(Error::Shape(format!("input of {} for oracle of {}", x.len(), self.len())));
        }
        let m = self.center(cond)?;
        let s2 = sigma * sigma;
        Ok(x.iter()
            .zip(&m)
            .zip(&self.var)
            .map(|((x, m), v)| m + v / (v + s2) * (x - m))
            .collect())
    }
}
