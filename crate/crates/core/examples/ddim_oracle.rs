//! Deterministic DDIM inversion followed by sampling returns the start point
//! when the denoiser is exact (a linear-Gaussian oracle).

use motok::diffusion::{ddim_invert, ddim_sample, Inversion, LinearGaussianOracle, ScheduleConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> motok::Result<()> {
    let sched = ScheduleConfig::default().build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 32;
    let oracle = LinearGaussianOracle::new(
        (0..n).map(|_| rng.random_range(-0.5..0.5)).collect(),
        (0..n).map(|_| rng.random_range(0.05..1.0)).collect(),
        0.7,
    )?;
    let cond: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x0: Vec<f32> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    println!("{} steps", sched.num_steps());
    for mode in [Inversion::FixedPoint, Inversion::Explicit] {
        for dt in [1, 10, 25, 50] {
            let xt = ddim_invert(&oracle, &sched, &x0, &cond, dt, mode)?;
            let back = ddim_sample(&oracle, &sched, &xt, &cond, dt)?;
            let err = back.iter().zip(&x0).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            println!("{mode:?} delta T {dt:2}: max round-trip error {err:.2e}");
        }
    }
    Ok(())
}
