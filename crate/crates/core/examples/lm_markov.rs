//! Trains the toy LM on a two-state Markov chain until its held-out loss
//! approaches the chain's entropy rate, then samples with grammar masking.

use motok::lm::{LmConfig, LmTrainer, Policy, ToyLm};
use motok::sequence::{validate, Special, TokenSequence, UnifiedVocab};
use motok::synth::{markov_entropy_rate, markov_sequence};
use motok::training::TrainConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> motok::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (p, q) = (0.1, 0.3);
    let vocab = UnifiedVocab::new(2, 1, 1)?;
    let cfg = LmConfig {
        vocab,
        layers: 1,
        dim: 32,
        heads: 2,
        context: 64,
        ffn_mult: 2,
        dropout: 0.0,
        seed: 0,
    };
    let corpus: Vec<TokenSequence> = (0..512)
        .map(|_| TokenSequence::from_ids(&vocab, markov_sequence(64, p, q, [0, 1], &mut rng)))
        .collect::<motok::Result<_>>()?;
    let held: Vec<Vec<u32>> = (0..128).map(|_| markov_sequence(64, p, q, [0, 1], &mut rng)).collect();
    let rows: Vec<&[u32]> = held.iter().map(|s| s.as_slice()).collect();

    let tcfg = TrainConfig {
        steps: 400,
        batch: 16,
        lr: 3e-3,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut trainer = LmTrainer::new(ToyLm::new(cfg.clone())?, tcfg);
    println!("untrained held-out loss {:.4} (ln 6 = {:.4})", trainer.lm.nll_batch(&rows)?, 6f64.ln());
    trainer.run(&corpus, |step, loss| {
        if step % 100 == 0 {
            println!("step {step:3} loss {loss:.4}");
        }
    })?;
    println!(
        "held-out loss {:.4}, entropy rate {:.4}",
        trainer.lm.nll_batch(&rows)?,
        markov_entropy_rate(p, q)
    );

    // a fresh model on a richer vocabulary, sampled under the grammar mask
    let gvocab = UnifiedVocab::new(8, 4, 4)?;
    let gen = ToyLm::new(LmConfig {
        vocab: gvocab,
        context: 32,
        ..cfg
    })?;
    let prefix = TokenSequence::from_ids(&gvocab, vec![gvocab.special(Special::Bos)])?;
    for _ in 0..3 {
        let g = gen.generate(&prefix, Policy::Temperature(1.0), true, &mut rng)?;
        let ok = validate(&gvocab, &g.seq).is_ok();
        println!("{} tokens, valid {ok}, truncated {}: {:?}", g.seq.len(), g.truncated, g.seq.ids);
    }
    Ok(())
}
