//! Fits the patch k-means keyframe tokenizer on a few frames and shows the
//! token grid and reconstruction error of a held-out frame.

use motok::sequence::{KeyframeConfig, StubKeyframeTokenizer, UnifiedVocab};
use motok::synth::MovingSquare;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> motok::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = KeyframeConfig {
        image_size: 64,
        patch_size: 8,
        kmeans_iters: 10,
    };
    let vocab = UnifiedVocab::new(256, 16, 16)?;
    let sq = MovingSquare::flat(64, 64, 20, (4, 10), (5, 3), 220);
    let frames: Vec<_> = (0..8).map(|t| sq.frame(t)).collect();
    let mut tok = StubKeyframeTokenizer::new(cfg)?;
    tok.fit(&frames, 16, &mut rng)?;

    let held = sq.frame(8);
    let ids = tok.tokenize(&held, &vocab)?;
    let local = tok.tokenize_local(&held)?;
    for row in local.chunks(cfg.grid()) {
        println!("  {}", row.iter().map(|i| format!("{i:2}")).collect::<Vec<_>>().join(" "));
    }
    let recon = tok.reconstruct(&ids, &vocab)?;
    let orig = held.luma().resize(recon.width, recon.height);
    let mae = orig.data.iter().zip(&recon.data).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum::<f64>() / orig.data.len() as f64;
    println!("{} tokens, mean abs error {mae:.1} grey levels", ids.len());
    Ok(())
}
