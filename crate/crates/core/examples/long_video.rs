//! Chained decoding of several clips: each keyframe starts from the partially
//! inverted last frame of the previous clip, so small delta T keeps clips close.

use motok::diffusion::{decode_long, Inversion, LinearGaussianOracle, ScheduleConfig};
use motok::motion::MotionField;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> motok::Result<()> {
    let sched = ScheduleConfig::default().build()?;
    let (len, t) = (16, 3);
    let gi = LinearGaussianOracle::isotropic(len, 1.0, 1.0)?;
    let gv = LinearGaussianOracle::isotropic(len * t, 0.1, 1.0)?;
    let make = |k: &[f32], f: &MotionField| -> motok::Result<Vec<f32>> { Ok(k.repeat(f.t)) };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let clips: Vec<(Vec<f32>, MotionField)> = (0..4)
        .map(|_| ((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), MotionField::zeros(t, 1, 1)))
        .collect();
    let dist = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f32>().sqrt();
    for dt in [0, 1, 10, 30, sched.num_steps()] {
        let out = decode_long(&gi, &gv, &sched, &clips, make, len, dt, Inversion::FixedPoint, &mut ChaCha8Rng::seed_from_u64(9))?;
        let gaps: Vec<String> = out
            .windows(2)
            .map(|w| format!("{:.2}", dist(&w[1].keyframe, w[0].last_frame(len))))
            .collect();
        println!("delta T {dt:2}: boundary distances {}", gaps.join(" "));
    }
    Ok(())
}
