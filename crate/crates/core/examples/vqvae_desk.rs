//! Trains a small motion tokenizer on synthetic constant / ramp / rotation fields.
//!
//! `cargo run --release --example vqvae_desk -- [steps]`

use motok::synth::mixed_fields;
use motok::vqvae::train::{eval_usage, recon_mse};
use motok::vqvae::{Axes, Downsample, MotionVqvae, TrainConfig, VqvaeConfig, VqvaeTrainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> motok::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let cfg = VqvaeConfig {
        t: 8,
        h: 8,
        w: 8,
        d_model: 32,
        heads: 4,
        ffn_mult: 2,
        blocks: 2,
        downsample: vec![
            Downsample { after_block: 1, axes: Axes::S },
            Downsample { after_block: 2, axes: Axes::ST },
        ],
        d_code: 8,
        codebook_size: 128,
        dead_code_steps: 50,
        ..VqvaeConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let train = mixed_fields(2000, cfg.t, cfg.h, cfg.w, 0.5, &mut rng);
    let held = mixed_fields(200, cfg.t, cfg.h, cfg.w, 0.5, &mut rng);
    let var: f64 = held.iter().flat_map(|f| f.vectors.iter()).map(|&v| (v as f64).powi(2)).sum::<f64>()
        / held.iter().map(|f| f.vectors.len()).sum::<usize>() as f64;
    println!("tokens per field: {}, held-out mean square {var:.4e}", cfg.num_tokens()?);
    let tcfg = TrainConfig { steps, batch: 16, lr: 2e-3, ..TrainConfig::default() };
    let mut trainer = VqvaeTrainer::new(MotionVqvae::new(cfg)?, tcfg);
    let t0 = std::time::Instant::now();
    trainer.run(&train, |s| {
        if s.step % 100 == 0 {
            println!("step {:5} recon {:.4e} commit {:.4e} revived {}", s.step, s.recon, s.commit, s.revived);
        }
    })?;
    let mse = recon_mse(&trainer.model, &held)?;
    let usage = eval_usage(&trainer.model, &held)?;
    println!(
        "held-out mse {mse:.4e}, perplexity {:.1}, used {} codes, {:.0}s",
        usage.perplexity,
        usage.used,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}
