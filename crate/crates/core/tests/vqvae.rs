mod common;

use motok::config::PipelineConfig;
use motok::synth::mixed_fields;
use motok::training::TrainConfig;
use motok::vqvae::codebook::LAPLACE_EPS;
use motok::vqvae::{Codebook, Metric, MotionVqvae, VqvaeConfig, VqvaeTrainer};
use motok_tensor::nn;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantize_is_the_normalized_argmin(seed in any::<u64>(), k in 1usize..64, d in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codes = nn::normal(&[k, d], 1.0, &mut rng).into_data();
        let cb = Codebook::from_codes(k, d, codes.clone(), Metric::Cosine, 0.99).unwrap();
        let zs = nn::normal(&[20, d], 1.0, &mut rng).into_data();
        let got = cb.quantize_batch(&zs).unwrap();
        for (i, z) in zs.chunks(d).enumerate() {
            prop_assert_eq!(got[i], common::brute_quantize(&codes, d, z));
        }
    }

    #[test]
    fn every_code_quantizes_to_itself(seed in any::<u64>(), k in 1usize..128) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cb = Codebook::random(k, 8, Metric::Cosine, 0.99, &mut rng);
        for id in 0..k {
            prop_assert_eq!(cb.quantize(cb.code(id)).unwrap(), id);
        }
    }

    #[test]
    fn ema_codes_are_smoothed_ratios(seed in any::<u64>(), k in 1usize..16, steps in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        let mut cb = Codebook::random(k, d, Metric::Cosine, 0.9, &mut rng);
        for _ in 0..steps {
            let n = rng.random_range(1..10);
            let zs = nn::normal(&[n, d], 1.0, &mut rng).into_data();
            let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            cb.ema_update(&ids, &zs).unwrap();
        }
        prop_assert!(cb.ema_size().iter().all(|&s| s >= 0.0));
        let total: f64 = cb.ema_size().iter().map(|&s| s as f64).sum();
        for j in 0..k {
            let smoothed = (cb.ema_size()[j] as f64 + LAPLACE_EPS) / (total + k as f64 * LAPLACE_EPS) * total;
            for i in 0..d {
                let want = cb.ema_sum()[j * d + i] as f64 / smoothed;
                let got = cb.code(j)[i] as f64;
                prop_assert!(got.is_finite());
                prop_assert!((got - want).abs() <= 1e-5 * want.abs().max(1.0), "code {} dim {}: {} vs {}", j, i, got, want);
            }
        }
    }
}

#[test]
fn default_geometry_shape_pipeline() {
    let cfg = VqvaeConfig {
        d_model: 16,
        heads: 2,
        ffn_mult: 1,
        ..VqvaeConfig::default()
    };
    let model = MotionVqvae::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let field = mixed_fields(1, cfg.t, cfg.h, cfg.w, 0.8, &mut rng).remove(0);
    assert_eq!(field.shape(), [24, 20, 36, 2]);
    let z = model.encode(&field).unwrap();
    assert_eq!(z.shape(), &[135, 32]);
    let ids = model.tokenize(&field).unwrap();
    assert_eq!(ids.len(), 135);
    assert!(ids.iter().all(|&i| i < 1024));
    let out = model.decode(&ids).unwrap();
    assert_eq!(out.shape(), [24, 20, 36, 2]);
    assert!(out.vectors.iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn wrong_input_shape_names_the_expected_grid() {
    let model = MotionVqvae::new(PipelineConfig::desk().tokenizer).unwrap();
    let field = motok::motion::MotionField::zeros(4, 8, 8);
    let err = model.encode(&field).unwrap_err().to_string();
    assert!(err.contains("(8, 8, 8)"), "{err}");
}

#[test]
fn training_is_deterministic_and_resumable() {
    let cfg = PipelineConfig::desk().tokenizer;
    let data = mixed_fields(32, cfg.t, cfg.h, cfg.w, 0.5, &mut ChaCha8Rng::seed_from_u64(2));
    let tcfg = TrainConfig {
        steps: 6,
        batch: 4,
        lr: 2e-3,
        ..TrainConfig::default()
    };
    let run = |steps: usize| {
        let mut t = VqvaeTrainer::new(MotionVqvae::new(cfg.clone()).unwrap(), tcfg.clone());
        for _ in 0..steps {
            t.step_on(&data).unwrap();
        }
        t
    };
    let a = run(6);
    let b = run(6);
    assert_eq!(a.to_tensors().unwrap(), b.to_tensors().unwrap());

    // checkpoint after 3 steps, reload, finish
    let half = run(3);
    let mut resumed = VqvaeTrainer::from_tensors(&half.to_tensors().unwrap()).unwrap();
    for _ in 0..3 {
        resumed.step_on(&data).unwrap();
    }
    assert_eq!(resumed.to_tensors().unwrap(), a.to_tensors().unwrap());
}
