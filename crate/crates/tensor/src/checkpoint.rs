//! MTOK: the repository-wide parameter file.
//!
//! ```text
//! "MTOK" | version u16 | count u32 | count x { name_len u16 | name | rank u8 | dims u32[rank] | f32[prod(dims)] }
//! ```
//! All integers and floats little-endian.

use std::io::Write;
use std::path::Path;

use crate::tensor::{Result, Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"MTOK";
pub const VERSION: u16 = 1;

pub fn encode(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len())
        .map_err(|_| TensorError::Format("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let nb = name.as_bytes();
        let nl = u16::try_from(nb.len())
            .map_err(|_| TensorError::Format(format!("tensor name too long: {} bytes", nb.len())))?;
        let rank = u8::try_from(t.rank())
            .map_err(|_| TensorError::Format(format!("rank {} too large", t.rank())))?;
        out.extend_from_slice(&nl.to_le_bytes());
        out.extend_from_slice(nb);
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| TensorError::Format(format!("dimension {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.reserve(t.numel() * 4);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            TensorError::Format(format!(
                "truncated while reading {what}: need {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(TensorError::Format("bad magic, expected \"MTOK\"".into()));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(TensorError::Format(format!("unsupported MTOK version {version}")));
    }
    let count = r.u32("count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let nl = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(nl, "name")?)
            .map_err(|_| TensorError::Format(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        if rank == 0 {
            return Err(TensorError::Format(format!("tensor `{name}` has rank 0")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dims")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| TensorError::Format(format!("tensor `{name}` is too large")))?;
        let raw = r.take(n.saturating_mul(4), "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&dims, data)
            .map_err(|e| TensorError::Format(format!("tensor `{name}`: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(TensorError::Format(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode(tensors)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&std::fs::read(path)?)
}

/// Stores a UTF-8 string as a rank-1 tensor of byte values.
pub fn text_tensor(s: &str) -> Tensor {
    let bytes: Vec<f32> = s.bytes().map(f32::from).collect();
    if bytes.is_empty() {
        return Tensor::new(&[1], vec![-1.0]).unwrap();
    }
    Tensor::new(&[bytes.len()], bytes).unwrap()
}

pub fn tensor_text(t: &Tensor) -> Result<String> {
    if t.data() == [-1.0] {
        return Ok(String::new());
    }
    let bytes = t
        .data()
        .iter()
        .map(|&v| {
            if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(TensorError::Format(format!("{v} is not a byte value")))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    String::from_utf8(bytes).map_err(|_| TensorError::Format("embedded text is not UTF-8".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let ts = vec![
            ("a".to_string(), Tensor::new(&[2, 3], (0..6).map(|v| v as f32).collect()).unwrap()),
            ("b.c".to_string(), Tensor::scalar(-0.5)),
        ];
        let bytes = encode(&ts).unwrap();
        assert_eq!(decode(&bytes).unwrap(), ts);
    }

    #[test]
    fn truncation_detected() {
        let bytes = encode(&[("x".into(), Tensor::ones(&[4]))]).unwrap();
        let err = decode(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn text_round_trip() {
        for s in ["", "{\"k\": 1}", "ünï"] {
            assert_eq!(tensor_text(&text_tensor(s)).unwrap(), s);
        }
    }
}
