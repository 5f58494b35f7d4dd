use motok_tensor::nn::normal;
use motok_tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Straight-line attention for one batch element and one head at a time.
fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, causal: bool) -> Vec<f32> {
    let (b, sq, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let sk = k.shape()[1];
    let dh = d / heads;
    let mut out = vec![0.0f32; b * sq * d];
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..sq {
                let mut logits = Vec::new();
                for j in 0..sk {
                    if causal && j > i {
                        break;
                    }
                    let mut s = 0.0f64;
                    for c in 0..dh {
                        s += q.get(&[bi, i, h * dh + c]) as f64 * k.get(&[bi, j, h * dh + c]) as f64;
                    }
                    logits.push(s / (dh as f64).sqrt());
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dh {
                    let mut acc = 0.0f64;
                    for (j, w) in e.iter().enumerate() {
                        acc += w / z * v.get(&[bi, j, h * dh + c]) as f64;
                    }
                    out[(bi * sq + i) * d + h * dh + c] = acc as f32;
                }
            }
        }
    }
    out
}

fn run(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, causal: bool) -> Tensor {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let y = tape.attention(qv, kv, vv, heads, causal).unwrap();
    tape.value(y).clone()
}

#[test]
fn single_key_returns_its_value() {
    let q = Tensor::new(&[1, 1, 2], vec![0.3, 0.7]).unwrap();
    let v = Tensor::new(&[1, 1, 2], vec![5.0, -2.0]).unwrap();
    assert_eq!(run(&q, &q, &v, 1, false).data(), v.data());
}

#[test]
fn orthogonal_query_averages_values() {
    let q = Tensor::new(&[1, 1, 2], vec![0.0, 1.0]).unwrap();
    let k = Tensor::new(&[1, 2, 2], vec![1.0, 0.0, -3.0, 0.0]).unwrap();
    let v = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
    assert_eq!(run(&q, &k, &v, 1, false).data(), &[2.0, 4.0]);
}

#[test]
fn matches_naive_oracle_on_four_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = normal(&[1, 4, 8], 1.0, &mut rng);
    let k = normal(&[1, 4, 8], 1.0, &mut rng);
    let v = normal(&[1, 4, 8], 1.0, &mut rng);
    for (heads, causal) in [(1, false), (2, false), (2, true), (4, true)] {
        let got = run(&q, &k, &v, heads, causal);
        let want = naive_attention(&q, &k, &v, heads, causal);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn causal_prefix_is_unaffected_by_future() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = normal(&[1, 6, 4], 1.0, &mut rng);
    let mut y = x.clone();
    for c in 0..4 {
        y.set(&[0, 5, c], 100.0);
    }
    let a = run(&x, &x, &x, 2, true);
    let b = run(&y, &y, &y, 2, true);
    assert_eq!(&a.data()[..20], &b.data()[..20]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..40, scale in 0.1f32..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = normal(&[rows, cols], scale, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = tape.softmax(xv).unwrap();
        for row in tape.value(y).data().chunks(cols) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardised(seed in any::<u64>(), rows in 1usize..6, cols in 2usize..64, shift in -10f32..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = normal(&[rows, cols], 2.0, &mut rng);
        for v in x.data_mut() {
            *v += shift;
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = tape.layer_norm(xv).unwrap();
        for row in tape.value(y).data().chunks(cols) {
            let m: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
            let var: f64 = row.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(m.abs() < 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn attention_matches_oracle(seed in any::<u64>(), sq in 1usize..5, sk in 1usize..5, heads in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = heads * 3;
        let q = normal(&[2, sq, d], 1.0, &mut rng);
        let k = normal(&[2, sk, d], 1.0, &mut rng);
        let v = normal(&[2, sk, d], 1.0, &mut rng);
        let got = run(&q, &k, &v, heads, false);
        let want = naive_attention(&q, &k, &v, heads, false);
        for (a, b) in got.data().iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-5);
        }
    }
}
