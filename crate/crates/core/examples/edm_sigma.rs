//! The log-normal noise-level distribution, its preconditioning coefficients
//! and loss weights at a few quantiles.

use motok::diffusion::edm::{loss_weight, precond, sample_sigma};
use motok::diffusion::EdmParams;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let edm = EdmParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut logs: Vec<f64> = (0..100_000).map(|_| sample_sigma(&edm, &mut rng).ln()).collect();
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    let std = (logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / logs.len() as f64).sqrt();
    println!("ln sigma: mean {mean:.3} (target {}), std {std:.3} (target {})", edm.logsigma_mean, edm.logsigma_std);

    logs.sort_by(f64::total_cmp);
    println!("{:>6} {:>9} {:>7} {:>7} {:>7} {:>8} {:>9}", "q", "sigma", "c_skip", "c_out", "c_in", "c_noise", "weight");
    for q in [0.01, 0.1, 0.5, 0.9, 0.99] {
        let s = logs[(q * logs.len() as f64) as usize].exp();
        let p = precond(s, edm.sigma_data);
        println!(
            "{q:>6} {s:>9.4} {:>7.4} {:>7.4} {:>7.4} {:>8.4} {:>9.3}",
            p.c_skip,
            p.c_out,
            p.c_in,
            p.c_noise,
            loss_weight(s, edm.sigma_data)
        );
    }
}
