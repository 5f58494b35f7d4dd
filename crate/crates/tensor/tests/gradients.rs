use motok_tensor::gradcheck::{check, GradCheckConfig};
use motok_tensor::nn::{self, normal};
use motok_tensor::{ParamStore, Result, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Op = fn(&mut Tape, &ParamStore) -> Result<Var>;

/// sum(y * w) with a fixed pseudo-random weight so every output element matters.
fn weighted_sum(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = (0..n).map(|i| ((i * 7919) % 13) as f32 / 13.0 - 0.4).collect();
    let w = tape.constant(Tensor::new(&shape, w)?);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn p(tape: &mut Tape, s: &ParamStore, name: &str) -> Var {
    nn::param(tape, s, name).unwrap()
}

fn store(seed: u64, shapes: &[(&str, &[usize])]) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for (name, shape) in shapes {
        s.insert(*name, normal(shape, 1.0, &mut rng));
    }
    s
}

fn run(name: &str, shapes: &[(&str, &[usize])], f: Op) {
    for seed in 0..10 {
        let s = store(seed, shapes);
        let report = check(f, &s, GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{name} seed {seed}: {:?}", report.failures());
    }
}

#[test]
fn elementwise_ops() {
    run("add", &[("a", &[3, 4]), ("b", &[3, 4])], |t, s| {
        let (a, b) = (p(t, s, "a"), p(t, s, "b"));
        let y = t.add(a, b)?;
        weighted_sum(t, y)
    });
    run("sub", &[("a", &[3, 4]), ("b", &[3, 4])], |t, s| {
        let (a, b) = (p(t, s, "a"), p(t, s, "b"));
        let y = t.sub(a, b)?;
        weighted_sum(t, y)
    });
    run("mul", &[("a", &[3, 4]), ("b", &[3, 4])], |t, s| {
        let (a, b) = (p(t, s, "a"), p(t, s, "b"));
        let y = t.mul(a, b)?;
        weighted_sum(t, y)
    });
    run("scale", &[("a", &[5])], |t, s| {
        let a = p(t, s, "a");
        let y = t.scale(a, -1.7)?;
        weighted_sum(t, y)
    });
    run("gelu", &[("a", &[2, 6])], |t, s| {
        let a = p(t, s, "a");
        let y = t.gelu(a)?;
        weighted_sum(t, y)
    });
}

#[test]
fn broadcast_ops() {
    run("add_broadcast", &[("x", &[2, 3, 4]), ("y", &[3, 1])], |t, s| {
        let (x, y) = (p(t, s, "x"), p(t, s, "y"));
        let z = t.add_broadcast(x, y)?;
        weighted_sum(t, z)
    });
    run("mul_row", &[("x", &[3, 4]), ("g", &[4])], |t, s| {
        let (x, g) = (p(t, s, "x"), p(t, s, "g"));
        let z = t.mul_row(x, g)?;
        weighted_sum(t, z)
    });
}

#[test]
fn matmul_and_reductions() {
    run("matmul", &[("a", &[2, 3, 4]), ("b", &[4, 5])], |t, s| {
        let (a, b) = (p(t, s, "a"), p(t, s, "b"));
        let y = t.matmul(a, b)?;
        weighted_sum(t, y)
    });
    run("mean", &[("a", &[7])], |t, s| {
        let a = p(t, s, "a");
        let sq = t.mul(a, a)?;
        t.mean(sq)
    });
    run("mse", &[("a", &[3, 3]), ("b", &[3, 3])], |t, s| {
        let (a, b) = (p(t, s, "a"), p(t, s, "b"));
        t.mse(a, b)
    });
}

#[test]
fn normalisation_ops() {
    run("softmax", &[("a", &[3, 5])], |t, s| {
        let a = p(t, s, "a");
        let y = t.softmax(a)?;
        weighted_sum(t, y)
    });
    run("layer_norm", &[("a", &[3, 6])], |t, s| {
        let a = p(t, s, "a");
        let y = t.layer_norm(a)?;
        weighted_sum(t, y)
    });
    run("cross_entropy", &[("a", &[4, 6])], |t, s| {
        let a = p(t, s, "a");
        t.cross_entropy(a, &[1, 5, 0, 2], &[true, false, true, true])
    });
}

#[test]
fn layout_ops() {
    run("reshape+permute", &[("a", &[2, 3, 4])], |t, s| {
        let a = p(t, s, "a");
        let r = t.reshape(a, &[6, 4])?;
        let r = t.reshape(r, &[2, 3, 4])?;
        let y = t.permute(r, &[1, 2, 0])?;
        weighted_sum(t, y)
    });
    run("pool", &[("a", &[1, 4, 2, 6, 2])], |t, s| {
        let a = p(t, s, "a");
        let y = t.avg_pool(a, [2, 2, 3])?;
        weighted_sum(t, y)
    });
    run("upsample", &[("a", &[1, 2, 1, 2, 2])], |t, s| {
        let a = p(t, s, "a");
        let y = t.upsample(a, [2, 2, 3])?;
        weighted_sum(t, y)
    });
    run("concat", &[("a", &[2, 3]), ("b", &[2, 2])], |t, s| {
        let (a, b) = (p(t, s, "a"), p(t, s, "b"));
        let y = t.concat(&[a, b, a])?;
        weighted_sum(t, y)
    });
    run("embedding", &[("e", &[5, 3])], |t, s| {
        let e = p(t, s, "e");
        let y = t.embedding(e, &[4, 0, 4, 2], &[2, 2])?;
        weighted_sum(t, y)
    });
    run("unfold", &[("a", &[2, 3, 4, 2])], |t, s| {
        let a = p(t, s, "a");
        let y = t.unfold(a, 3)?;
        weighted_sum(t, y)
    });
}

#[test]
fn attention_op() {
    for causal in [false, true] {
        let f: Op = if causal {
            |t, s| {
                let (q, k, v) = (p(t, s, "q"), p(t, s, "k"), p(t, s, "v"));
                let y = t.attention(q, k, v, 2, true)?;
                weighted_sum(t, y)
            }
        } else {
            |t, s| {
                let (q, k, v) = (p(t, s, "q"), p(t, s, "k"), p(t, s, "v"));
                let y = t.attention(q, k, v, 2, false)?;
                weighted_sum(t, y)
            }
        };
        run("attention", &[("q", &[2, 3, 4]), ("k", &[2, 3, 4]), ("v", &[2, 3, 4])], f);
    }
    // cross attention with a different key length
    run("cross_attention", &[("q", &[1, 2, 4]), ("k", &[1, 5, 4]), ("v", &[1, 5, 4])], |t, s| {
        let (q, k, v) = (p(t, s, "q"), p(t, s, "k"), p(t, s, "v"));
        let y = t.attention(q, k, v, 1, false)?;
        weighted_sum(t, y)
    });
}

#[test]
fn matmul_sum_gradient_is_ones_times_bt() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = normal(&[5, 7], 1.0, &mut rng);
    let b = normal(&[7, 3], 1.0, &mut rng);
    let mut s = ParamStore::new();
    s.insert("a", a);
    s.insert("b", b.clone());
    let cfg = GradCheckConfig {
        h: 1e-3,
        five_point: false,
        rel_tol: 1e-4,
        abs_floor: 0.0,
        noise_mult: 0.0,
        retries: 0,
    };
    let f = |t: &mut Tape, s: &ParamStore| {
        let (a, b) = (p(t, s, "a"), p(t, s, "b"));
        let y = t.matmul(a, b)?;
        t.sum(y)
    };
    let mut tape = Tape::new();
    let loss = f(&mut tape, &s).unwrap();
    let g = tape.backward(loss).unwrap().param("a").unwrap();
    // ones(5,3) . b^T: every row equals the row sums of b
    for i in 0..5 {
        for k in 0..7 {
            let expect: f32 = (0..3).map(|j| b.get(&[k, j])).sum();
            assert!((g.get(&[i, k]) - expect).abs() < 1e-6);
        }
    }
    let report = check(f, &s, cfg).unwrap();
    assert!(report.passed(), "{:?}", report.tensors);
}

#[test]
fn gradients_are_deterministic() {
    let s = store(4, &[("q", &[2, 6, 8]), ("w", &[8, 8])]);
    let f = |t: &mut Tape, s: &ParamStore| {
        let (q, w) = (p(t, s, "q"), p(t, s, "w"));
        let h = t.matmul(q, w)?;
        let a = t.attention(h, h, h, 2, true)?;
        let n = t.layer_norm(a)?;
        weighted_sum(t, n)
    };
    let grads = |s: &ParamStore| {
        let mut tape = Tape::new();
        let l = f(&mut tape, s).unwrap();
        let g = tape.backward(l).unwrap();
        (tape.value(l).clone(), g.param("q").unwrap(), g.param("w").unwrap())
    };
    let (l1, q1, w1) = grads(&s);
    let (l2, q2, w2) = grads(&s);
    assert_eq!(l1.data()[0].to_bits(), l2.data()[0].to_bits());
    assert_eq!(q1, q2);
    assert_eq!(w1, w2);
}
