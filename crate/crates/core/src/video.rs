//! RVID container, clip sampling and luma conversion.
//!
//! RVID layout (little-endian):
//! `"RVID" | version u16 = 1 | frame_count u32 | height u32 | width u32 | channels u8 | fps_num u32 | fps_den u32 | frames`

use std::path::Path;

use image::imageops::FilterType;
use image::GrayImage;

use crate::error::{Error, Result};

pub const RVID_MAGIC: &[u8; 4] = b"RVID";
pub const RVID_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4 + 4 + 1 + 4 + 4;

/// One 8-bit frame, row-major `H x W x C`.
#[derive(Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl std::fmt::Debug for Frame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Frame({}x{}x{})", self.height, self.width, self.channels)
    }
}

impl Frame {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Size(format!(
                "frame {height}x{width}x{channels} needs {} bytes, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn pixel(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_dims(&self, other: &Frame) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// BT.601 luma; single-channel frames are returned as is.
    pub fn luma(&self) -> Luma {
        let data = match self.channels {
            1 => self.data.clone(),
            _ => self
                .data
                .chunks(self.channels)
                .map(|p| {
                    let y = 0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32;
                    y.round().clamp(0.0, 255.0) as u8
                })
                .collect(),
        };
        Luma {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

/// Single-channel 8-bit plane used for matching.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Luma {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Luma {
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Triangle-filtered resize.
    pub fn resize(&self, width: usize, height: usize) -> Luma {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let img = GrayImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("plane dimensions");
        let out = image::imageops::resize(&img, width as u32, height as u32, FilterType::Triangle);
        Luma {
            width,
            height,
            data: out.into_raw(),
        }
    }

    pub fn into_frame(self) -> Frame {
        Frame {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawVideo {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub fps_num: u32,
    pub fps_den: u32,
    pub frames: Vec<Frame>,
}

impl RawVideo {
    pub fn new(fps_num: u32, fps_den: u32, frames: Vec<Frame>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Contract("video needs at least one frame".into()))?;
        let (width, height, channels) = (first.width, first.height, first.channels);
        if let Some(i) = frames.iter().position(|f| !f.same_dims(first)) {
            return Err(Error::Size(format!("frame {i} dimensions differ from frame 0")));
        }
        let v = Self {
            width,
            height,
            channels,
            fps_num,
            fps_den,
            frames,
        };
        v.check()?;
        Ok(v)
    }

    fn check(&self) -> Result<()> {
        if self.fps_num == 0 || self.fps_den == 0 {
            return Err(Error::Format(format!("fps {}/{} must be positive", self.fps_num, self.fps_den)));
        }
        if !(self.channels == 1 || self.channels == 3) {
            return Err(Error::Format(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Format("zero-sized frames".into()));
        }
        Ok(())
    }

    pub fn fps(&self) -> f64 {
        self.fps_num as f64 / self.fps_den as f64
    }

    pub fn frame_bytes(&self) -> usize {
        self.width * self.height * self.channels
    }
}

pub fn write_rvid(v: &RawVideo) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + v.frames.len() * v.frame_bytes());
    out.extend_from_slice(RVID_MAGIC);
    out.extend_from_slice(&RVID_VERSION.to_le_bytes());
    out.extend_from_slice(&(v.frames.len() as u32).to_le_bytes());
    out.extend_from_slice(&(v.height as u32).to_le_bytes());
    out.extend_from_slice(&(v.width as u32).to_le_bytes());
    out.push(v.channels as u8);
    out.extend_from_slice(&v.fps_num.to_le_bytes());
    out.extend_from_slice(&v.fps_den.to_le_bytes());
    for f in &v.frames {
        out.extend_from_slice(&f.data);
    }
    out
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

pub fn read_rvid(bytes: &[u8]) -> Result<RawVideo> {
    if bytes.len() < 4 || &bytes[..4] != RVID_MAGIC {
        return Err(Error::Format("bad magic, expected \"RVID\"".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            what: "RVID header".into(),
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != RVID_VERSION {
        return Err(Error::Format(format!("unsupported RVID version {version}")));
    }
    let count = le_u32(bytes, 6) as usize;
    let height = le_u32(bytes, 10) as usize;
    let width = le_u32(bytes, 14) as usize;
    let channels = bytes[18] as usize;
    let fps_num = le_u32(bytes, 19);
    let fps_den = le_u32(bytes, 23);
    let header = RawVideo {
        width,
        height,
        channels,
        fps_num,
        fps_den,
        frames: Vec::new(),
    };
    header.check()?;
    if count == 0 {
        return Err(Error::Format("RVID declares zero frames".into()));
    }
    let fb = header.frame_bytes();
    let expected = fb
        .checked_mul(count)
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Format("declared payload size overflows".into()))?;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            what: "RVID payload".into(),
            expected: expected - HEADER_LEN,
            actual: bytes.len() - HEADER_LEN,
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!("{} trailing bytes after last frame", bytes.len() - expected)));
    }
    let frames = bytes[HEADER_LEN..]
        .chunks_exact(fb)
        .map(|c| Frame {
            width,
            height,
            channels,
            data: c.to_vec(),
        })
        .collect();
    Ok(RawVideo { frames, ..header })
}

pub fn load_rvid(path: &Path) -> Result<RawVideo> {
    read_rvid(&std::fs::read(path)?)
}

pub fn save_rvid(path: &Path, v: &RawVideo) -> Result<()> {
    std::fs::write(path, write_rvid(v))?;
    Ok(())
}

/// A keyframe plus the frames that follow it at the clip rate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Clip {
    pub keyframe: Frame,
    pub frames: Vec<Frame>,
    pub clip_fps: u32,
    pub video_id: String,
    /// Source frame index of the keyframe.
    pub start_frame: usize,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Source indices of the frames kept when resampling to `clip_fps`.
///
/// Output index `k` maps to `round(k * src_fps / clip_fps)`, in integer arithmetic.
pub fn sample_indices(frame_count: usize, fps_num: u32, fps_den: u32, clip_fps: u32) -> Vec<usize> {
    let num = fps_num as u128;
    let den = fps_den as u128 * clip_fps as u128;
    let mut out = Vec::new();
    for k in 0u128.. {
        // round(k * num / den) with halves rounded up
        let idx = (2 * k * num + den) / (2 * den);
        if idx >= frame_count as u128 {
            break;
        }
        out.push(idx as usize);
    }
    out
}

pub fn sample_clips(video: &RawVideo, clip_fps: u32, clip_len: usize, video_id: &str) -> Result<Vec<Clip>> {
    if clip_fps == 0 || clip_len == 0 {
        return Err(Error::Config("clip_fps and clip_len must be positive".into()));
    }
    if (video.fps_num as u64) < clip_fps as u64 * video.fps_den as u64 {
        return Err(Error::Contract(format!(
            "source fps {} is below clip fps {clip_fps}",
            video.fps()
        )));
    }
    let idx = sample_indices(video.frames.len(), video.fps_num, video.fps_den, clip_fps);
    Ok(idx
        .chunks_exact(clip_len + 1)
        .map(|w| Clip {
            keyframe: video.frames[w[0]].clone(),
            frames: w[1..].iter().map(|&i| video.frames[i].clone()).collect(),
            clip_fps,
            video_id: video_id.to_string(),
            start_frame: w[0],
        })
        .collect())
}

/// Reads numbered PNG/PGM/PPM frames from a directory (sorted by file name).
pub fn ingest_frames(dir: &Path, fps_num: u32, fps_den: u32) -> Result<RawVideo> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                Some("png" | "pgm" | "ppm" | "pnm")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Contract(format!("no PNG/PGM frames in {}", dir.display())));
    }
    let mut frames = Vec::with_capacity(paths.len());
    for p in &paths {
        let img = image::open(p)?;
        let frame = match img.color().channel_count() {
            1 | 2 => {
                let g = img.to_luma8();
                Frame::new(g.width() as usize, g.height() as usize, 1, g.into_raw())?
            }
            _ => {
                let c = img.to_rgb8();
                Frame::new(c.width() as usize, c.height() as usize, 3, c.into_raw())?
            }
        };
        frames.push(frame);
    }
    RawVideo::new(fps_num, fps_den, frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(frames: usize) -> RawVideo {
        let fr = (0..frames)
            .map(|t| Frame::new(3, 2, 1, vec![t as u8; 6]).unwrap())
            .collect();
        RawVideo::new(30, 1, fr).unwrap()
    }

    #[test]
    fn header_layout() {
        let b = write_rvid(&tiny(2));
        assert_eq!(&b[..4], b"RVID");
        assert_eq!(b.len(), HEADER_LEN + 12);
        assert_eq!(read_rvid(&b).unwrap(), tiny(2));
    }

    #[test]
    fn truncated_payload() {
        let b = write_rvid(&tiny(2));
        match read_rvid(&b[..b.len() - 6]) {
            Err(Error::Truncated { expected, actual, .. }) => assert_eq!((expected, actual), (12, 6)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stride_five_at_thirty_fps() {
        let idx = sample_indices(150, 30, 1, 6);
        assert_eq!(idx.len(), 30);
        assert_eq!(&idx[..3], &[0, 5, 10]);
    }

    #[test]
    fn ntsc_rate_rounds_to_nearest() {
        // 30000/1001 fps -> 6 fps: stride 4.995
        let idx = sample_indices(40, 30000, 1001, 6);
        assert_eq!(&idx[..5], &[0, 5, 10, 15, 20]);
        assert_eq!(idx[100.min(idx.len() - 1)], 35);
    }

    #[test]
    fn luma_weights() {
        let f = Frame::new(1, 1, 3, vec![255, 0, 0]).unwrap();
        assert_eq!(f.luma().data, vec![76]);
    }
}
