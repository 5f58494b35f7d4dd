mod common;

use motok::sequence::{
    build_sequence, read_jsonl, read_tseq_all, scan_prefix, segments_of, validate, write_jsonl, write_tseq_all,
    GrammarState, Modality, Order, Pair, Special, TokenSequence, UnifiedVocab,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pairs(vocab: &UnifiedVocab, rng: &mut impl Rng) -> Vec<Pair> {
    (0..rng.random_range(1..=3))
        .map(|_| Pair {
            text: (0..rng.random_range(0..=4)).map(|_| rng.random_range(0..vocab.text_size)).collect(),
            clips: (0..rng.random_range(0..=2))
                .map(|_| motok::sequence::ClipTokens {
                    visual: (0..rng.random_range(1..=5)).map(|_| vocab.visual_offset() + rng.random_range(0..vocab.visual_size)).collect(),
                    motion: (0..rng.random_range(1..=5)).map(|_| vocab.motion_offset() + rng.random_range(0..vocab.motion_size)).collect(),
                })
                .collect(),
        })
        .collect()
}

#[test]
fn constructor_output_is_always_valid() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10_000 {
        let vocab = common::random_vocab(&mut rng);
        let seq = common::random_sequence(&vocab, &mut rng);
        assert!(validate(&vocab, &seq).is_ok(), "{:?}", seq.ids);
        let segs = segments_of(&vocab, &seq.ids).unwrap();
        // segments tile the sequence
        let mut at = 0;
        for s in &segs {
            assert_eq!(s.start, at);
            at += s.len;
        }
        assert_eq!(at, seq.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn order_exchange_keeps_the_multiset(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = common::random_vocab(&mut rng);
        let pairs = random_pairs(&vocab, &mut rng);
        let a = build_sequence(&vocab, &pairs, Order::TextFirst).unwrap();
        let b = build_sequence(&vocab, &pairs, Order::MediaFirst).unwrap();
        prop_assert!(validate(&vocab, &a).is_ok());
        prop_assert!(validate(&vocab, &b).is_ok());
        let (mut x, mut y) = (a.ids.clone(), b.ids.clone());
        x.sort_unstable();
        y.sort_unstable();
        prop_assert_eq!(x, y);
    }

    #[test]
    fn arbitrary_ids_never_panic_the_validator(seed in any::<u64>(), len in 0usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = UnifiedVocab::new(4, 3, 3).unwrap();
        let ids: Vec<u32> = (0..len).map(|_| rng.random_range(0..vocab.total() + 2)).collect();
        match scan_prefix(&vocab, &ids) {
            Ok(_) => {}
            Err(v) => prop_assert!(v.position < len),
        }
        if let Ok(seq) = TokenSequence::from_ids(&vocab, ids.clone()) {
            if validate(&vocab, &seq).is_ok() {
                // a valid sequence has balanced delimiters
                let count = |s: Special| ids.iter().filter(|&&i| i == vocab.special(s)).count();
                prop_assert_eq!(count(Special::Img), count(Special::ImgEnd));
                prop_assert_eq!(count(Special::Mov), count(Special::MovEnd));
            }
        }
    }

    #[test]
    fn walks_through_allowed_ids_stay_valid(seed in any::<u64>(), budget in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = UnifiedVocab::new(3, 2, 2).unwrap();
        let mut ids = vec![vocab.special(Special::Bos)];
        let mut st = GrammarState::Outside;
        while ids.len() < budget + 1 && st != GrammarState::Ended {
            let remaining = budget + 1 - ids.len();
            let ok = st.allowed(&vocab, remaining);
            let choices: Vec<u32> = (0..vocab.total()).filter(|&i| ok[i as usize]).collect();
            prop_assert!(!choices.is_empty());
            let id = choices[rng.random_range(0..choices.len())];
            st = st.step(&vocab, ids.len(), id).unwrap();
            ids.push(id);
        }
        // at the budget, close the sequence if the walk left it open
        if st != GrammarState::Ended {
            prop_assert_eq!(st, GrammarState::Outside, "open span at the budget: {:?}", ids);
            ids.push(vocab.special(Special::Eos));
        }
        let seq = TokenSequence::from_ids(&vocab, ids).unwrap();
        prop_assert!(validate(&vocab, &seq).is_ok());
    }

    #[test]
    fn token_files_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = common::random_vocab(&mut rng);
        let seqs: Vec<TokenSequence> = (0..rng.random_range(0..4)).map(|_| common::random_sequence(&vocab, &mut rng)).collect();
        let t = write_tseq_all(&vocab, &seqs);
        prop_assert_eq!(&read_tseq_all(&vocab, &t).unwrap(), &seqs);
        let j = write_jsonl(&vocab, &seqs).unwrap();
        prop_assert_eq!(&read_jsonl(&vocab, std::str::from_utf8(&j).unwrap()).unwrap(), &seqs);
    }

    #[test]
    fn modality_is_total_over_the_layout(text in 1u32..50, visual in 1u32..50, motion in 1u32..50) {
        let v = UnifiedVocab::new(text, visual, motion).unwrap();
        let mut counts = [0u32; 4];
        for id in 0..v.total() {
            let m = v.modality_of(id).unwrap();
            let k = match m {
                Modality::Text => 0,
                Modality::Visual => 1,
                Modality::Motion => 2,
                Modality::Special => 3,
            };
            counts[k] += 1;
        }
        prop_assert_eq!(counts, [text, visual, motion, 7]);
        prop_assert!(v.modality_of(v.total()).is_none());
    }
}

#[test]
fn mismatched_vocabulary_is_rejected() {
    let a = UnifiedVocab::new(256, 16, 32).unwrap();
    let b = UnifiedVocab::new(256, 16, 64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let seq = common::random_sequence(&a, &mut rng);
    assert!(read_tseq_all(&b, &write_tseq_all(&a, std::slice::from_ref(&seq))).is_err());
    let j = write_jsonl(&a, &[seq]).unwrap();
    assert!(read_jsonl(&b, std::str::from_utf8(&j).unwrap()).is_err());
}
