use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use motok_tensor::Tensor;

use crate::error::{Error, Result};

pub const LAPLACE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Distance between L2-normalised vectors.
    Cosine,
    Euclidean,
}

/// `K` codes of width `d` with exponential-moving-average cluster statistics.
#[derive(Debug)]
pub struct Codebook {
    pub k: usize,
    pub d: usize,
    pub metric: Metric,
    pub decay: f32,
    codes: Vec<f32>,
    ema_size: Vec<f32>,
    ema_sum: Vec<f32>,
    /// Consecutive updates since each code was last assigned.
    idle: Vec<u32>,
    degenerate: AtomicU64,
}

impl Clone for Codebook {
    fn clone(&self) -> Self {
        Self {
            k: self.k,
            d: self.d,
            metric: self.metric,
            decay: self.decay,
            codes: self.codes.clone(),
            ema_size: self.ema_size.clone(),
            ema_sum: self.ema_sum.clone(),
            idle: self.idle.clone(),
            degenerate: AtomicU64::new(self.degenerate.load(Ordering::Relaxed)),
        }
    }
}

impl PartialEq for Codebook {
    fn eq(&self, o: &Self) -> bool {
        self.k == o.k
            && self.d == o.d
            && self.metric == o.metric
            && self.decay == o.decay
            && self.codes == o.codes
            && self.ema_size == o.ema_size
            && self.ema_sum == o.ema_sum
            && self.idle == o.idle
    }
}

fn norm64(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

impl Codebook {
    /// Codes start as the given vectors with unit cluster size.
    pub fn from_codes(k: usize, d: usize, codes: Vec<f32>, metric: Metric, decay: f32) -> Result<Self> {
        if k == 0 || d == 0 || codes.len() != k * d {
            return Err(Error::Shape(format!("codebook {k}x{d} needs {} values, got {}", k * d, codes.len())));
        }
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Config(format!("decay {decay} outside [0, 1]")));
        }
        Ok(Self {
            k,
            d,
            metric,
            decay,
            ema_size: vec![1.0; k],
            ema_sum: codes.clone(),
            codes,
            idle: vec![0; k],
            degenerate: AtomicU64::new(0),
        })
    }

    pub fn random(k: usize, d: usize, metric: Metric, decay: f32, rng: &mut impl Rng) -> Self {
        let codes = motok_tensor::nn::normal(&[k, d], 1.0, rng).into_data();
        Self::from_codes(k, d, codes, metric, decay).unwrap()
    }

    pub fn codes(&self) -> &[f32] {
        &self.codes
    }

    pub fn code(&self, id: usize) -> &[f32] {
        &self.codes[id * self.d..(id + 1) * self.d]
    }

    pub fn ema_size(&self) -> &[f32] {
        &self.ema_size
    }

    pub fn ema_sum(&self) -> &[f32] {
        &self.ema_sum
    }

    pub fn idle_steps(&self) -> &[u32] {
        &self.idle
    }

    /// Number of zero-vector inputs that fell back to unnormalised distance.
    pub fn degenerate_count(&self) -> u64 {
        self.degenerate.load(Ordering::Relaxed)
    }

    fn prepared(&self) -> Vec<f64> {
        match self.metric {
            Metric::Euclidean => self.codes.iter().map(|&v| v as f64).collect(),
            Metric::Cosine => self
                .codes
                .chunks(self.d)
                .flat_map(|c| {
                    let n = norm64(c);
                    c.iter().map(move |&v| if n > 0.0 { v as f64 / n } else { 0.0 })
                })
                .collect(),
        }
    }

    fn nearest(&self, z: &[f32], prepared: &[f64]) -> usize {
        let (target, table): (Vec<f64>, &[f64]) = match self.metric {
            Metric::Euclidean => (z.iter().map(|&v| v as f64).collect(), prepared),
            Metric::Cosine => {
                let n = norm64(z);
                if n == 0.0 {
                    self.degenerate.fetch_add(1, Ordering::Relaxed);
                    return self.nearest_raw(z);
                }
                (z.iter().map(|&v| v as f64 / n).collect(), prepared)
            }
        };
        argmin(&target, table, self.d)
    }

    fn nearest_raw(&self, z: &[f32]) -> usize {
        let target: Vec<f64> = z.iter().map(|&v| v as f64).collect();
        let raw: Vec<f64> = self.codes.iter().map(|&v| v as f64).collect();
        argmin(&target, &raw, self.d)
    }

    /// Index of the nearest code; ties go to the smallest index.
    pub fn quantize(&self, z: &[f32]) -> Result<usize> {
        if z.len() != self.d {
            return Err(Error::Shape(format!("vector of width {} for codebook width {}", z.len(), self.d)));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("cannot quantize a non-finite vector".into()));
        }
        Ok(self.nearest(z, &self.prepared()))
    }

    /// Quantizes rows of a flat `n x d` buffer.
    pub fn quantize_batch(&self, zs: &[f32]) -> Result<Vec<usize>> {
        if !zs.len().is_multiple_of(self.d) {
            return Err(Error::Shape(format!("{} values is not a multiple of width {}", zs.len(), self.d)));
        }
        if zs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("cannot quantize non-finite latents".into()));
        }
        let prepared = self.prepared();
        Ok(zs.par_chunks(self.d).map(|z| self.nearest(z, &prepared)).collect())
    }

    /// Gathers code vectors for `ids` into a flat buffer.
    pub fn lookup(&self, ids: &[usize]) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(ids.len() * self.d);
        for (i, &id) in ids.iter().enumerate() {
            if id >= self.k {
                return Err(Error::Vocab {
                    index: i,
                    message: format!("code id {id} >= codebook size {}", self.k),
                });
            }
            out.extend_from_slice(self.code(id));
        }
        Ok(out)
    }

    /// EMA update from this batch's assignments (`ids[i]` owns row `i` of `zs`).
    ///
    /// Sizes and sums decay toward the batch statistics; codes are the ratio of
    /// sum to Laplace-smoothed size. An empty batch only decays the statistics.
    pub fn ema_update(&mut self, ids: &[usize], zs: &[f32]) -> Result<()> {
        if zs.len() != ids.len() * self.d {
            return Err(Error::Shape(format!("{} ids for {} latent values", ids.len(), zs.len())));
        }
        if let Some((i, &id)) = ids.iter().enumerate().find(|(_, &id)| id >= self.k) {
            return Err(Error::Vocab {
                index: i,
                message: format!("code id {id} >= codebook size {}", self.k),
            });
        }
        let mut counts = vec![0u32; self.k];
        for &id in ids {
            counts[id] += 1;
        }
        for (idle, &c) in self.idle.iter_mut().zip(&counts) {
            *idle = if c > 0 { 0 } else { idle.saturating_add(1) };
        }
        if self.decay == 1.0 {
            return Ok(());
        }
        let d = self.decay as f64;
        let mut sums = vec![0.0f64; self.k * self.d];
        for (&id, z) in ids.iter().zip(zs.chunks(self.d)) {
            for (s, &v) in sums[id * self.d..(id + 1) * self.d].iter_mut().zip(z) {
                *s += v as f64;
            }
        }
        for (size, &c) in self.ema_size.iter_mut().zip(&counts) {
            *size = (d * *size as f64 + (1.0 - d) * c as f64) as f32;
        }
        for (s, &new) in self.ema_sum.iter_mut().zip(&sums) {
            *s = (d * *s as f64 + (1.0 - d) * new) as f32;
        }
        if ids.is_empty() {
            return Ok(());
        }
        let n: f64 = self.ema_size.iter().map(|&s| s as f64).sum();
        let denom = n + self.k as f64 * LAPLACE_EPS;
        for k in 0..self.k {
            let smoothed = (self.ema_size[k] as f64 + LAPLACE_EPS) / denom * n;
            for j in 0..self.d {
                let i = k * self.d + j;
                self.codes[i] = (self.ema_sum[i] as f64 / smoothed) as f32;
            }
        }
        Ok(())
    }

    /// Reseeds codes idle for at least `threshold` updates with random rows of `recent`.
    pub fn revive_dead(&mut self, threshold: u32, recent: &[f32], rng: &mut impl Rng) -> usize {
        let rows = recent.len() / self.d;
        if rows == 0 {
            return 0;
        }
        let mut revived = 0;
        for k in 0..self.k {
            if self.idle[k] >= threshold {
                let r = rng.random_range(0..rows);
                let src = &recent[r * self.d..(r + 1) * self.d];
                self.codes[k * self.d..(k + 1) * self.d].copy_from_slice(src);
                self.ema_sum[k * self.d..(k + 1) * self.d].copy_from_slice(src);
                self.ema_size[k] = 1.0;
                self.idle[k] = 0;
                revived += 1;
            }
        }
        revived
    }

    pub fn to_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.codes"), Tensor::new(&[self.k, self.d], self.codes.clone()).unwrap()),
            (format!("{prefix}.ema_size"), Tensor::new(&[self.k], self.ema_size.clone()).unwrap()),
            (format!("{prefix}.ema_sum"), Tensor::new(&[self.k, self.d], self.ema_sum.clone()).unwrap()),
            (
                format!("{prefix}.idle"),
                Tensor::new(&[self.k], self.idle.iter().map(|&v| v as f32).collect()).unwrap(),
            ),
        ]
    }

    pub fn from_tensors(prefix: &str, tensors: &[(String, Tensor)], metric: Metric, decay: f32) -> Result<Self> {
        let get = |suffix: &str| {
            let name = format!("{prefix}.{suffix}");
            tensors
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")))
        };
        let codes = get("codes")?;
        if codes.rank() != 2 {
            return Err(Error::Format("codebook codes must be rank 2".into()));
        }
        let (k, d) = (codes.shape()[0], codes.shape()[1]);
        let mut cb = Self::from_codes(k, d, codes.data().to_vec(), metric, decay)?;
        let size = get("ema_size")?;
        let sum = get("ema_sum")?;
        let idle = get("idle")?;
        if size.numel() != k || sum.numel() != k * d || idle.numel() != k {
            return Err(Error::Format("codebook statistics do not match code shape".into()));
        }
        cb.ema_size = size.data().to_vec();
        cb.ema_sum = sum.data().to_vec();
        cb.idle = idle.data().iter().map(|&v| v as u32).collect();
        Ok(cb)
    }
}

fn argmin(target: &[f64], table: &[f64], d: usize) -> usize {
    let mut best = (f64::INFINITY, 0usize);
    for (k, c) in table.chunks(d).enumerate() {
        let mut s = 0.0f64;
        for (a, b) in target.iter().zip(c) {
            let diff = a - b;
            s += diff * diff;
        }
        if s < best.0 {
            best = (s, k);
        }
    }
    best.1
}

/// Code-usage diagnostics over a window of assignments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Usage {
    /// `exp(entropy)` of the empirical code distribution.
    pub perplexity: f64,
    pub dead: usize,
    pub used: usize,
}

pub fn codebook_usage(ids: &[usize], k: usize) -> Result<Usage> {
    if ids.is_empty() {
        return Err(Error::Contract("usage needs a nonempty assignment history".into()));
    }
    let mut counts = vec![0usize; k];
    for &id in ids {
        if id >= k {
            return Err(Error::Vocab {
                index: id,
                message: format!("code id {id} >= codebook size {k}"),
            });
        }
        counts[id] += 1;
    }
    let n = ids.len() as f64;
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    let used = counts.iter().filter(|&&c| c > 0).count();
    Ok(Usage {
        perplexity: entropy.exp(),
        dead: k - used,
        used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_by_angle() {
        let cb = Codebook::from_codes(2, 2, vec![1.0, 0.0, 0.0, 1.0], Metric::Cosine, 0.995).unwrap();
        assert_eq!(cb.quantize(&[0.9, 0.1]).unwrap(), 0);
        // magnitude is irrelevant under the cosine metric
        assert_eq!(cb.quantize(&[0.01, 5.0]).unwrap(), 1);
    }

    #[test]
    fn zero_vector_falls_back() {
        let cb = Codebook::from_codes(2, 2, vec![3.0, 0.0, 0.1, 0.1], Metric::Cosine, 0.995).unwrap();
        assert_eq!(cb.quantize(&[0.0, 0.0]).unwrap(), 1);
        assert_eq!(cb.degenerate_count(), 1);
    }

    #[test]
    fn usage_extremes() {
        let u = codebook_usage(&[0, 1, 2, 3], 4).unwrap();
        assert!((u.perplexity - 4.0).abs() < 1e-12);
        let u = codebook_usage(&[2, 2, 2], 8).unwrap();
        assert_eq!((u.perplexity, u.dead), (1.0, 7));
    }

    #[test]
    fn decay_one_is_frozen() {
        let mut cb = Codebook::from_codes(2, 1, vec![1.0, 2.0], Metric::Euclidean, 1.0).unwrap();
        cb.ema_update(&[0, 0], &[10.0, 12.0]).unwrap();
        assert_eq!(cb.codes(), &[1.0, 2.0]);
    }

    #[test]
    fn empty_batch_keeps_codes() {
        let mut cb = Codebook::from_codes(2, 1, vec![1.0, 2.0], Metric::Euclidean, 0.9).unwrap();
        cb.ema_update(&[], &[]).unwrap();
        assert_eq!(cb.codes(), &[1.0, 2.0]);
        assert!((cb.ema_size()[0] - 0.9).abs() < 1e-7);
    }
}
