mod common;

use motok::lm::{LmConfig, LmTrainer, Policy, ToyLm};
use motok::sequence::{validate, Special, TokenSequence, UnifiedVocab};
use motok::training::TrainConfig;
use motok_tensor::nn;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(vocab: UnifiedVocab, context: usize, seed: u64) -> LmConfig {
    LmConfig {
        vocab,
        layers: 2,
        dim: 16,
        heads: 2,
        context,
        ffn_mult: 2,
        dropout: 0.0,
        seed,
    }
}

/// Model with a random head so logits are not all equal.
fn random_model(cfg: LmConfig, rng: &mut impl Rng) -> ToyLm {
    let mut m = ToyLm::new(cfg).unwrap();
    let v = m.cfg.vocab.total() as usize;
    m.params.insert("head.w", nn::normal(&[m.cfg.dim, v], 1.0, rng));
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn logits_ignore_the_future(seed in any::<u64>(), len in 2usize..24, cut in any::<prop::sample::Index>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = UnifiedVocab::new(8, 4, 4).unwrap();
        let m = random_model(small(vocab, 24, seed), &mut rng);
        let ids: Vec<u32> = (0..len).map(|_| rng.random_range(0..vocab.total())).collect();
        let i = cut.index(len - 1);
        let mut other = ids.clone();
        for id in &mut other[i + 1..] {
            *id = rng.random_range(0..vocab.total());
        }
        let v = vocab.total() as usize;
        let a = m.logits(&ids).unwrap();
        let b = m.logits(&other).unwrap();
        let rows = (i + 1) * v;
        prop_assert_eq!(&a.data()[..rows], &b.data()[..rows]);
    }

    #[test]
    fn constrained_samples_are_valid(seed in any::<u64>(), temp in 0.5f32..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = UnifiedVocab::new(4, 3, 3).unwrap();
        let m = random_model(small(vocab, 20, seed), &mut rng);
        let prefix = TokenSequence::from_ids(&vocab, vec![vocab.special(Special::Bos)]).unwrap();
        for _ in 0..10 {
            let g = m.generate(&prefix, Policy::Temperature(temp), true, &mut rng).unwrap();
            prop_assert!(validate(&vocab, &g.seq).is_ok(), "{:?}", g.seq.ids);
            prop_assert!(g.seq.len() <= 20);
        }
    }
}

#[test]
fn sampling_is_seeded() {
    let vocab = UnifiedVocab::new(8, 4, 4).unwrap();
    let m = random_model(small(vocab, 32, 1), &mut ChaCha8Rng::seed_from_u64(1));
    let prefix = TokenSequence::from_ids(&vocab, vec![vocab.special(Special::Bos)]).unwrap();
    let draw = |s| m.generate(&prefix, Policy::Temperature(1.0), true, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
    assert_eq!(draw(4), draw(4));
    let greedy = |s| m.generate(&prefix, Policy::Greedy, true, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
    assert_eq!(greedy(1), greedy(2));
}

#[test]
fn zero_head_loss_is_log_vocab() {
    let vocab = UnifiedVocab::default();
    let m = ToyLm::new(LmConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let seq = common::random_sequence(&vocab, &mut rng);
    let l = m.nll(&seq).unwrap() as f64;
    let want = (vocab.total() as f64).ln();
    assert!((l - want).abs() < 1e-4 * want, "{l} vs {want}");
}

#[test]
fn single_sequence_overfits() {
    let vocab = UnifiedVocab::new(16, 4, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let seq = common::random_sequence(&vocab, &mut rng);
    let tcfg = TrainConfig {
        steps: 300,
        batch: 1,
        lr: 1e-2,
        weight_decay: 0.0,
        warmup_frac: 0.0,
        ..TrainConfig::default()
    };
    let mut t = LmTrainer::new(ToyLm::new(small(vocab, 64, 0)).unwrap(), tcfg);
    t.run(std::slice::from_ref(&seq), |_, _| {}).unwrap();
    let l = t.lm.nll(&seq).unwrap();
    assert!(l < 0.01, "loss {l}");
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let vocab = UnifiedVocab::new(8, 4, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let corpus: Vec<TokenSequence> = (0..16).map(|_| common::random_sequence(&vocab, &mut rng)).collect();
    let tcfg = TrainConfig {
        steps: 8,
        batch: 4,
        ..TrainConfig::default()
    };
    let run = |n: usize| {
        let mut t = LmTrainer::new(ToyLm::new(small(vocab, 128, 0)).unwrap(), tcfg.clone());
        for _ in 0..n {
            t.step_on(&corpus).unwrap();
        }
        t
    };
    let full = run(8);
    let mut resumed = LmTrainer::from_tensors(&run(4).to_tensors().unwrap()).unwrap();
    for _ in 0..4 {
        resumed.step_on(&corpus).unwrap();
    }
    assert_eq!(resumed.to_tensors().unwrap(), full.to_tensors().unwrap());
}
