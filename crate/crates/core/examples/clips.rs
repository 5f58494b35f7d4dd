//! RVID round trip and resampling a 30 fps video into 6 fps clips.

use motok::motion::{clip_motion, read_mvec, write_mvec};
use motok::synth::gradient_video;
use motok::video::{read_rvid, sample_clips, sample_indices, write_rvid};

fn main() -> motok::Result<()> {
    let video = gradient_video(64, 48, 3, 90, 30);
    let bytes = write_rvid(&video);
    let back = read_rvid(&bytes)?;
    assert_eq!(back, video);
    println!("RVID: {} frames, {} bytes", back.frames.len(), bytes.len());

    println!("6 fps picks source frames {:?}", &sample_indices(90, 30, 1, 6)[..8]);
    let clips = sample_clips(&video, 6, 4, "gradient")?;
    for c in &clips {
        println!("clip at frame {:3}: keyframe + {} frames", c.start_frame, c.len());
    }

    let field = clip_motion(&clips[0], 16, 8)?;
    let mvec = write_mvec(&field);
    assert_eq!(write_mvec(&read_mvec(&mvec)?), mvec);
    println!("MVEC: field {:?}, {} bytes", field.shape(), mvec.len());
    Ok(())
}
