//! Trains the toy detokenizer on moving squares, then decodes held-out clips
//! with their true motion and with the motion zeroed out.
//!
//! `cargo run --release --example toy_detok -- [steps]`

use motok::diffusion::detok::{psnr, reconstruct, square_clips, DetokTrainer, SquareConfig};
use motok::diffusion::{DetokConfig, ScheduleConfig, ToyUNet3D};
use motok::training::TrainConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> motok::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let cfg = DetokConfig::default();
    let sq = SquareConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let train = square_clips(&cfg, &sq, 512, false, &mut rng)?;
    let held = square_clips(&cfg, &sq, 20, true, &mut rng)?;
    let sched = ScheduleConfig::default().build()?;

    let tcfg = TrainConfig { steps, batch: 8, lr: 2e-3, ..TrainConfig::default() };
    let mut trainer = DetokTrainer::new(ToyUNet3D::new(cfg)?, sched.edm, tcfg);
    let t0 = std::time::Instant::now();
    trainer.run(&train, |step, loss| {
        if step % 100 == 0 {
            println!("step {step:5} loss {loss:.4} ({:.0}s)", t0.elapsed().as_secs_f64());
        }
    })?;

    let mut wins = 0;
    let mut gain = 0.0;
    for (i, clip) in held.iter().enumerate() {
        let with = reconstruct(&trainer.net, &sched, &clip.pack, &mut ChaCha8Rng::seed_from_u64(i as u64))?;
        let without = reconstruct(&trainer.net, &sched, &clip.pack.without_motion(), &mut ChaCha8Rng::seed_from_u64(i as u64))?;
        let (a, b) = (psnr(&with, &clip.frames), psnr(&without, &clip.frames));
        println!("clip {i:2}: motion {a:6.2} dB, zero motion {b:6.2} dB");
        wins += (a > b) as usize;
        gain += a - b;
    }
    println!(
        "motion wins {wins}/{}, mean gain {:.2} dB, {:.0}s",
        held.len(),
        gain / held.len() as f64,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}
