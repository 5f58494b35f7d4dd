mod common;

use motok::synth::gradient_video;
use motok::video::{read_rvid, sample_clips, sample_indices, write_rvid, Frame, RawVideo};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn thirty_fps_video_of_150_frames_gives_one_clip() {
    let v = gradient_video(32, 32, 1, 150, 30);
    let clips = sample_clips(&v, 6, 24, "v").unwrap();
    assert_eq!(clips.len(), 1);
    assert_eq!(clips[0].start_frame, 0);
    assert_eq!(clips[0].keyframe, v.frames[0]);
    assert_eq!(clips[0].frames[0], v.frames[5]);
    assert_eq!(clips[0].frames[23], v.frames[120]);
}

#[test]
fn matching_rate_uses_consecutive_frames() {
    let v = gradient_video(16, 16, 3, 50, 6);
    let clips = sample_clips(&v, 6, 24, "v").unwrap();
    assert_eq!(clips.len(), 2);
    assert_eq!(clips[1].start_frame, 25);
    assert_eq!(clips[1].frames[..], v.frames[26..50]);
}

#[test]
fn too_short_video_gives_no_clips() {
    let v = gradient_video(16, 16, 1, 24, 6);
    assert!(sample_clips(&v, 6, 24, "v").unwrap().is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn windows_tile_without_overlap(frames in 1usize..200, num in 1u32..=60, den in 1u32..=2, clip_fps in 1u32..=12, len in 1usize..=24) {
        prop_assume!(num as f64 / den as f64 >= clip_fps as f64);
        let v = RawVideo::new(num, den, (0..frames).map(|i| Frame::filled(2, 2, 1, i as u8)).collect()).unwrap();
        let idx = sample_indices(frames, num, den, clip_fps);
        let clips = sample_clips(&v, clip_fps, len, "v").unwrap();
        prop_assert_eq!(clips.len(), idx.len() / (len + 1));
        let mut last_end = None;
        for (k, c) in clips.iter().enumerate() {
            prop_assert_eq!(c.len(), len);
            prop_assert_eq!(c.start_frame, idx[k * (len + 1)]);
            let end = idx[k * (len + 1) + len];
            prop_assert!(end < frames);
            if let Some(e) = last_end {
                prop_assert!(c.start_frame > e);
            }
            last_end = Some(end);
        }
    }

    #[test]
    fn rvid_round_trip(seed in any::<u64>()) {
        let v = common::random_video(&mut ChaCha8Rng::seed_from_u64(seed));
        let bytes = write_rvid(&v);
        let back = read_rvid(&bytes).unwrap();
        prop_assert_eq!(&back, &v);
        prop_assert_eq!(write_rvid(&back), bytes);
    }

    #[test]
    fn damaged_rvid_is_an_error_not_a_panic(seed in any::<u64>(), cut in any::<prop::sample::Index>(), flip in any::<prop::sample::Index>()) {
        let bytes = write_rvid(&common::random_video(&mut ChaCha8Rng::seed_from_u64(seed)));
        prop_assert!(read_rvid(&bytes[..cut.index(bytes.len())]).is_err());
        let mut b = bytes.clone();
        let i = flip.index(b.len().min(31));
        b[i] ^= 0xA5;
        // header damage may still describe a valid (different) video; it must never panic
        let _ = read_rvid(&b);
    }
}
