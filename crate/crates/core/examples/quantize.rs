//! Cosine-metric codebook: nearest-code lookup and EMA updates pulling codes
//! toward the data they win.

use motok::vqvae::{codebook_usage, Codebook, Metric};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> motok::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (k, d) = (8, 4);
    let mut cb = Codebook::random(k, d, Metric::Cosine, 0.99, &mut rng);

    // four directions, noisy
    let centers = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];
    let mut ids = Vec::new();
    for step in 0..300 {
        let zs: Vec<f32> = (0..64)
            .flat_map(|i| centers[i % 4].map(|c: f32| c + rng.random_range(-0.1..0.1)))
            .collect();
        ids = cb.quantize_batch(&zs)?;
        cb.ema_update(&ids, &zs)?;
        if step % 100 == 0 {
            println!("step {step}: assignments {:?}", &ids[..8]);
        }
    }
    let usage = codebook_usage(&ids, k)?;
    println!("used {} of {k} codes, perplexity {:.2}", usage.used, usage.perplexity);
    for c in centers {
        let id = cb.quantize(&c)?;
        let code: Vec<String> = cb.code(id).iter().map(|v| format!("{v:.2}")).collect();
        println!("{c:?} -> code {id} [{}]", code.join(", "));
    }
    Ok(())
}
