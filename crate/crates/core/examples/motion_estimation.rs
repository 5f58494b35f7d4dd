//! Block-matching motion between two frames of a textured square moving
//! 3 px right and 2 px down.

use motok::motion::estimate_motion;
use motok::synth::MovingSquare;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> motok::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sq = MovingSquare::textured(96, 64, 32, (20, 12), (3, 2), &mut rng);
    let (prev, cur) = (sq.frame(0).luma(), sq.frame(1).luma());
    let m = estimate_motion(&prev, &cur, 16, 8)?;
    println!("{}x{} blocks", m.hb, m.wb);
    for row in m.vectors.chunks(m.wb) {
        let cells: Vec<String> = row.iter().map(|(dx, dy)| format!("({dx:+},{dy:+})")).collect();
        println!("  {}", cells.join(" "));
    }
    let moving = m.vectors.iter().filter(|&&v| v == (3, 2)).count();
    println!("{moving} blocks report the square's velocity");
    Ok(())
}
