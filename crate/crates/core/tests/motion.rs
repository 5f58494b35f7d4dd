mod common;

use motok::motion::{estimate_motion, MotionField};
use motok::video::Luma;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matches_exhaustive_search(seed in any::<u64>(), block in prop::sample::select(vec![2usize, 4, 8]), range in 0i32..=5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (rng.random_range(block..=40), rng.random_range(block..=40));
        let prev = common::random_luma(w, h, &mut rng);
        let cur = if rng.random_bool(0.5) {
            common::shifted(&prev, rng.random_range(-3..=3), rng.random_range(-3..=3), 4, &mut rng)
        } else {
            // few grey levels so ties are common
            Luma { width: w, height: h, data: (0..w * h).map(|_| rng.random_range(0..3u8) * 60).collect() }
        };
        let m = estimate_motion(&prev, &cur, block, range).unwrap();
        let (hb, wb, vecs) = common::brute_motion(&prev, &cur, block, range);
        prop_assert_eq!((m.hb, m.wb), (hb, wb));
        prop_assert_eq!(m.vectors, vecs);
    }

    #[test]
    fn identical_frames_are_still(seed in any::<u64>(), flat in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (rng.random_range(16..=64), rng.random_range(16..=64));
        let f = if flat {
            Luma { width: w, height: h, data: vec![rng.random(); w * h] }
        } else {
            common::random_luma(w, h, &mut rng)
        };
        let m = estimate_motion(&f, &f, 16, 8).unwrap();
        prop_assert!(m.vectors.iter().all(|&v| v == (0, 0)));
    }

    #[test]
    fn components_stay_in_range(seed in any::<u64>(), range in 0i32..=8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prev = common::random_luma(48, 32, &mut rng);
        let cur = common::random_luma(48, 32, &mut rng);
        let m = estimate_motion(&prev, &cur, 8, range).unwrap();
        prop_assert!(m.vectors.iter().all(|&(dx, dy)| dx.abs() <= range && dy.abs() <= range));
        let raw: Vec<f32> = m.vectors.iter().flat_map(|&(dx, dy)| [dx as f32, dy as f32]).collect();
        let field = MotionField::from_vectors(1, m.hb, m.wb, raw, false).unwrap();
        let n = field.normalize(48, 32).unwrap();
        prop_assert!(n.vectors.iter().all(|v| (-1.0..=1.0).contains(v)));
        prop_assert!(n.check().is_none());
    }

    #[test]
    fn normalize_round_trips(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vectors: Vec<f32> = (0..2 * 3 * 4 * 2).map(|_| rng.random_range(-8i32..=8) as f32).collect();
        let f = MotionField::from_vectors(2, 3, 4, vectors, false).unwrap();
        let back = f.normalize(64, 48).unwrap().denormalize(64, 48).unwrap();
        for (a, b) in back.vectors.iter().zip(&f.vectors) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_fields_resize_to_constants(dx in -1.0f32..1.0, dy in -1.0f32..1.0, h in 1usize..12, w in 1usize..12) {
        let f = MotionField::from_vectors(2, h, w, [dx, dy].repeat(2 * h * w), true).unwrap();
        let r = f.resize(20, 36).unwrap().field;
        prop_assert_eq!(r.shape(), [2, 20, 36, 2]);
        prop_assert!(r.vectors.chunks(2).all(|v| v == [dx, dy]));
    }
}

#[test]
fn global_shift_is_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (sx, sy) in [(1, 0), (0, -2), (3, 3), (-5, 4), (8, -8), (-7, 0)] {
        let prev = common::random_luma(128, 96, &mut rng);
        let cur = common::shifted(&prev, sx, sy, 0, &mut rng);
        let m = estimate_motion(&prev, &cur, 16, 8).unwrap();
        // blocks whose true source lies inside the frame; the rest cannot express the shift
        let (mut eligible, mut hits) = (0, 0);
        for by in 0..m.hb {
            for bx in 0..m.wb {
                let (px, py) = ((bx * 16) as i32 - sx, (by * 16) as i32 - sy);
                if px >= 0 && py >= 0 && px + 16 <= 128 && py + 16 <= 96 {
                    eligible += 1;
                    hits += (m.vectors[by * m.wb + bx] == (sx, sy)) as usize;
                }
            }
        }
        assert!(hits * 100 >= 95 * eligible, "shift ({sx},{sy}): {hits}/{eligible}");
    }
}

#[test]
fn doubling_resize_repeats_cells() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let v: Vec<f32> = (0..10 * 18 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
    let f = MotionField::from_vectors(1, 10, 18, v, true).unwrap();
    let r = f.resize(20, 36).unwrap().field;
    for y in 0..20 {
        for x in 0..36 {
            assert_eq!(r.get(0, y, x), f.get(0, y / 2, x / 2));
        }
    }
}
