//! Unified vocabulary, interleaved token sequences, their file formats and the
//! stub keyframe tokenizer.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use motok_tensor::Tensor;

use crate::error::{Error, Result};
use crate::video::{Frame, Luma};
use crate::vqvae::codebook::{Codebook, Metric};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Visual,
    Motion,
    Special,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Text => "text",
            Modality::Visual => "visual",
            Modality::Motion => "motion",
            Modality::Special => "special",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Special {
    Bos,
    Eos,
    Img,
    ImgEnd,
    Mov,
    MovEnd,
    Pad,
}

impl Special {
    pub const ALL: [Special; 7] = [
        Special::Bos,
        Special::Eos,
        Special::Img,
        Special::ImgEnd,
        Special::Mov,
        Special::MovEnd,
        Special::Pad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Special::Bos => "[BOS]",
            Special::Eos => "[EOS]",
            Special::Img => "[IMG]",
            Special::ImgEnd => "[/IMG]",
            Special::Mov => "[MOV]",
            Special::MovEnd => "[/MOV]",
            Special::Pad => "[PAD]",
        }
    }
}

/// One id space laid out as `[text | visual | motion | specials]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnifiedVocab {
    pub text_size: u32,
    pub visual_size: u32,
    pub motion_size: u32,
}

impl Default for UnifiedVocab {
    fn default() -> Self {
        Self {
            text_size: 256,
            visual_size: 256,
            motion_size: 1024,
        }
    }
}

impl UnifiedVocab {
    pub fn new(text_size: u32, visual_size: u32, motion_size: u32) -> Result<Self> {
        let v = Self {
            text_size,
            visual_size,
            motion_size,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.visual_size == 0 || self.motion_size == 0 {
            return Err(Error::Config("visual and motion vocabularies must be nonempty".into()));
        }
        (self.text_size as u64 + self.visual_size as u64 + self.motion_size as u64 + 7)
            .try_into()
            .map(|_: u32| ())
            .map_err(|_| Error::Config("vocabulary does not fit 32-bit ids".into()))
    }

    pub fn visual_offset(&self) -> u32 {
        self.text_size
    }

    pub fn motion_offset(&self) -> u32 {
        self.text_size + self.visual_size
    }

    pub fn special_offset(&self) -> u32 {
        self.motion_offset() + self.motion_size
    }

    pub fn total(&self) -> u32 {
        self.special_offset() + Special::ALL.len() as u32
    }

    pub fn special(&self, s: Special) -> u32 {
        self.special_offset() + Special::ALL.iter().position(|&x| x == s).unwrap() as u32
    }

    pub fn special_of(&self, id: u32) -> Option<Special> {
        id.checked_sub(self.special_offset())
            .and_then(|i| Special::ALL.get(i as usize).copied())
    }

    /// `None` for ids outside the vocabulary.
    pub fn modality_of(&self, id: u32) -> Option<Modality> {
        if id < self.visual_offset() {
            Some(Modality::Text)
        } else if id < self.motion_offset() {
            Some(Modality::Visual)
        } else if id < self.special_offset() {
            Some(Modality::Motion)
        } else if id < self.total() {
            Some(Modality::Special)
        } else {
            None
        }
    }

    fn local(&self, m: Modality, local: usize) -> Result<u32> {
        let (size, off) = match m {
            Modality::Text => (self.text_size, 0),
            Modality::Visual => (self.visual_size, self.visual_offset()),
            Modality::Motion => (self.motion_size, self.motion_offset()),
            Modality::Special => (Special::ALL.len() as u32, self.special_offset()),
        };
        if local >= size as usize {
            return Err(Error::Vocab {
                index: local,
                message: format!("{m} id {local} outside a range of {size}"),
            });
        }
        Ok(off + local as u32)
    }

    pub fn text_id(&self, local: usize) -> Result<u32> {
        self.local(Modality::Text, local)
    }

    pub fn visual_id(&self, local: usize) -> Result<u32> {
        self.local(Modality::Visual, local)
    }

    pub fn motion_id(&self, local: usize) -> Result<u32> {
        self.local(Modality::Motion, local)
    }

    /// Position of `id` inside its own modality range.
    pub fn local_index(&self, id: u32) -> Option<(Modality, usize)> {
        let m = self.modality_of(id)?;
        let off = match m {
            Modality::Text => 0,
            Modality::Visual => self.visual_offset(),
            Modality::Motion => self.motion_offset(),
            Modality::Special => self.special_offset(),
        };
        Some((m, (id - off) as usize))
    }

    /// First 8 bytes of SHA-256 over the layout, little-endian.
    pub fn signature(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(b"motok-vocab-v1");
        for n in [self.text_size, self.visual_size, self.motion_size] {
            h.update(n.to_le_bytes());
        }
        for s in Special::ALL {
            h.update(s.name().as_bytes());
        }
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }

    /// Byte-level text tokens.
    pub fn encode_text(&self, text: &str) -> Result<Vec<u32>> {
        text.bytes().map(|b| self.text_id(b as usize)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub modality: Modality,
    pub start: usize,
    pub len: usize,
}

/// Ids plus the modality spans that tile them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub segments: Vec<Segment>,
}

/// Maximal same-modality runs; every special token is its own segment.
pub fn segments_of(vocab: &UnifiedVocab, ids: &[u32]) -> Result<Vec<Segment>> {
    let mut out: Vec<Segment> = Vec::new();
    for (i, &id) in ids.iter().enumerate() {
        let m = vocab.modality_of(id).ok_or_else(|| Error::Vocab {
            index: i,
            message: format!("id {id} outside vocabulary of {}", vocab.total()),
        })?;
        match out.last_mut() {
            Some(s) if s.modality == m && m != Modality::Special => s.len += 1,
            _ => out.push(Segment {
                modality: m,
                start: i,
                len: 1,
            }),
        }
    }
    Ok(out)
}

impl TokenSequence {
    pub fn from_ids(vocab: &UnifiedVocab, ids: Vec<u32>) -> Result<Self> {
        let segments = segments_of(vocab, &ids)?;
        Ok(Self { ids, segments })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// One clip's keyframe and motion tokens, already in unified ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipTokens {
    pub visual: Vec<u32>,
    pub motion: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub text: Vec<u32>,
    pub clips: Vec<ClipTokens>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    TextFirst,
    MediaFirst,
}

fn check_range(vocab: &UnifiedVocab, ids: &[u32], want: Modality, what: &str) -> Result<()> {
    for (i, &id) in ids.iter().enumerate() {
        if vocab.modality_of(id) != Some(want) {
            return Err(Error::Vocab {
                index: i,
                message: format!("{what} id {id} is not in the {want} range"),
            });
        }
    }
    Ok(())
}

/// `[BOS] (pair)* [EOS]` where each clip is `[IMG] v.. [/IMG] [MOV] m.. [/MOV]`.
pub fn build_sequence(vocab: &UnifiedVocab, pairs: &[Pair], order: Order) -> Result<TokenSequence> {
    let mut ids = vec![vocab.special(Special::Bos)];
    for p in pairs {
        check_range(vocab, &p.text, Modality::Text, "text")?;
        let mut media = Vec::new();
        for c in &p.clips {
            check_range(vocab, &c.visual, Modality::Visual, "keyframe")?;
            check_range(vocab, &c.motion, Modality::Motion, "motion")?;
            media.push(vocab.special(Special::Img));
            media.extend_from_slice(&c.visual);
            media.push(vocab.special(Special::ImgEnd));
            media.push(vocab.special(Special::Mov));
            media.extend_from_slice(&c.motion);
            media.push(vocab.special(Special::MovEnd));
        }
        match order {
            Order::TextFirst => {
                ids.extend_from_slice(&p.text);
                ids.extend(media);
            }
            Order::MediaFirst => {
                ids.extend(media);
                ids.extend_from_slice(&p.text);
            }
        }
    }
    ids.push(vocab.special(Special::Eos));
    TokenSequence::from_ids(vocab, ids)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub position: usize,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "position {}: {}", self.position, self.message)
    }
}

/// Where a left-to-right scan currently is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrammarState {
    Outside,
    /// Inside `[IMG]` (opened at `open`) after `n` visual ids.
    InImg { open: usize, n: usize },
    InMov { open: usize, n: usize },
    /// `[EOS]` seen; only `[PAD]` may follow.
    Ended,
}

impl GrammarState {
    /// Advances by one id at position `pos`.
    pub fn step(self, vocab: &UnifiedVocab, pos: usize, id: u32) -> std::result::Result<GrammarState, Violation> {
        let bad = |message: String| Violation { position: pos, message };
        let m = vocab
            .modality_of(id)
            .ok_or_else(|| bad(format!("id {id} outside vocabulary of {}", vocab.total())))?;
        let sp = vocab.special_of(id);
        use GrammarState::*;
        match self {
            Ended => match sp {
                Some(Special::Pad) => Ok(Ended),
                _ => Err(bad(format!("id {id} after [EOS]"))),
            },
            Outside => match (m, sp) {
                (Modality::Text, _) => Ok(Outside),
                (Modality::Visual, _) | (Modality::Motion, _) => {
                    Err(bad(format!("{m} id {id} outside its delimiters")))
                }
                (_, Some(Special::Bos)) if pos == 0 => Ok(Outside),
                (_, Some(Special::Bos)) => Err(bad("[BOS] after the first position".into())),
                (_, Some(Special::Img)) => Ok(InImg { open: pos, n: 0 }),
                (_, Some(Special::Mov)) => Ok(InMov { open: pos, n: 0 }),
                (_, Some(Special::Eos)) => Ok(Ended),
                (_, Some(s)) => Err(bad(format!("unexpected {}", s.name()))),
                (_, None) => unreachable!(),
            },
            InImg { open, n } => match (m, sp) {
                (Modality::Visual, _) => Ok(InImg { open, n: n + 1 }),
                (_, Some(Special::ImgEnd)) if n > 0 => Ok(Outside),
                (_, Some(Special::ImgEnd)) => Err(bad("empty [IMG] span".into())),
                (_, Some(s)) => Err(bad(format!("{} inside [IMG] opened at {open}", s.name()))),
                _ => Err(bad(format!("{m} id {id} inside [IMG] opened at {open}"))),
            },
            InMov { open, n } => match (m, sp) {
                (Modality::Motion, _) => Ok(InMov { open, n: n + 1 }),
                (_, Some(Special::MovEnd)) if n > 0 => Ok(Outside),
                (_, Some(Special::MovEnd)) => Err(bad("empty [MOV] span".into())),
                (_, Some(s)) => Err(bad(format!("{} inside [MOV] opened at {open}", s.name()))),
                _ => Err(bad(format!("{m} id {id} inside [MOV] opened at {open}"))),
            },
        }
    }

    /// Ids that may come next. `remaining` counts positions left including this one.
    pub fn allowed(self, vocab: &UnifiedVocab, remaining: usize) -> Vec<bool> {
        let mut ok = vec![false; vocab.total() as usize];
        let mut set = |id: u32| ok[id as usize] = true;
        use GrammarState::*;
        match self {
            Ended => {}
            Outside => {
                (0..vocab.visual_offset()).for_each(&mut set);
                set(vocab.special(Special::Eos));
                if remaining >= 3 {
                    set(vocab.special(Special::Img));
                    set(vocab.special(Special::Mov));
                }
            }
            InImg { n, .. } => {
                if n > 0 {
                    set(vocab.special(Special::ImgEnd));
                }
                if n == 0 || remaining > 1 {
                    (vocab.visual_offset()..vocab.motion_offset()).for_each(&mut set);
                }
            }
            InMov { n, .. } => {
                if n > 0 {
                    set(vocab.special(Special::MovEnd));
                }
                if n == 0 || remaining > 1 {
                    (vocab.motion_offset()..vocab.special_offset()).for_each(&mut set);
                }
            }
        }
        ok
    }
}

/// Scans a possibly unfinished sequence; open spans at the end are allowed.
pub fn scan_prefix(vocab: &UnifiedVocab, ids: &[u32]) -> std::result::Result<GrammarState, Violation> {
    let mut st = GrammarState::Outside;
    for (i, &id) in ids.iter().enumerate() {
        st = st.step(vocab, i, id)?;
    }
    Ok(st)
}

/// First invariant violation, if any.
pub fn validate(vocab: &UnifiedVocab, seq: &TokenSequence) -> std::result::Result<(), Violation> {
    match scan_prefix(vocab, &seq.ids)? {
        GrammarState::InImg { open, .. } => {
            return Err(Violation {
                position: open,
                message: "[IMG] never closed".into(),
            })
        }
        GrammarState::InMov { open, .. } => {
            return Err(Violation {
                position: open,
                message: "[MOV] never closed".into(),
            })
        }
        _ => {}
    }
    let canonical = segments_of(vocab, &seq.ids).map_err(|e| Violation {
        position: 0,
        message: e.to_string(),
    })?;
    if canonical != seq.segments {
        let at = canonical
            .iter()
            .zip(&seq.segments)
            .find(|(a, b)| a != b)
            .map(|(a, _)| a.start)
            .unwrap_or_else(|| canonical.len().min(seq.segments.len()));
        return Err(Violation {
            position: at,
            message: "segments do not tile the ids".into(),
        });
    }
    Ok(())
}

/// Motion spans in order.
pub fn motion_groups(vocab: &UnifiedVocab, seq: &TokenSequence) -> Vec<Vec<u32>> {
    spans(vocab, seq, Special::Mov, Special::MovEnd)
}

pub fn visual_groups(vocab: &UnifiedVocab, seq: &TokenSequence) -> Vec<Vec<u32>> {
    spans(vocab, seq, Special::Img, Special::ImgEnd)
}

fn spans(vocab: &UnifiedVocab, seq: &TokenSequence, open: Special, close: Special) -> Vec<Vec<u32>> {
    let (o, c) = (vocab.special(open), vocab.special(close));
    let mut out = Vec::new();
    let mut cur: Option<Vec<u32>> = None;
    for &id in &seq.ids {
        if id == o {
            cur = Some(Vec::new());
        } else if id == c {
            out.extend(cur.take());
        } else if let Some(v) = cur.as_mut() {
            v.push(id);
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRecord {
    vocab_sig: String,
    segments: Vec<Segment>,
    ids: Vec<u32>,
}

pub fn to_jsonl_line(vocab: &UnifiedVocab, seq: &TokenSequence) -> Result<String> {
    Ok(serde_json::to_string(&JsonRecord {
        vocab_sig: format!("{:016x}", vocab.signature()),
        segments: seq.segments.clone(),
        ids: seq.ids.clone(),
    })?)
}

pub fn write_jsonl(vocab: &UnifiedVocab, seqs: &[TokenSequence]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for s in seqs {
        writeln!(out, "{}", to_jsonl_line(vocab, s)?)?;
    }
    Ok(out)
}

/// Parses JSON lines, checking the vocabulary signature and the segment tiling.
pub fn read_jsonl(vocab: &UnifiedVocab, text: &str) -> Result<Vec<TokenSequence>> {
    let want = format!("{:016x}", vocab.signature());
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: JsonRecord = serde_json::from_str(line)?;
        if r.vocab_sig != want {
            return Err(Error::Format(format!(
                "line {}: vocabulary signature {} does not match {want}",
                n + 1,
                r.vocab_sig
            )));
        }
        let canonical = segments_of(vocab, &r.ids)?;
        if canonical != r.segments {
            return Err(Error::Format(format!("line {}: segments do not tile the ids", n + 1)));
        }
        out.push(TokenSequence {
            ids: r.ids,
            segments: r.segments,
        });
    }
    Ok(out)
}

pub const TSEQ_MAGIC: &[u8; 4] = b"TSEQ";
pub const TSEQ_VERSION: u16 = 1;
const TSEQ_HEADER: usize = 18;

/// One TSEQ record; records are concatenated back to back in a file.
pub fn write_tseq(sig: u64, ids: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(TSEQ_HEADER + 4 * ids.len());
    out.extend_from_slice(TSEQ_MAGIC);
    out.extend_from_slice(&TSEQ_VERSION.to_le_bytes());
    out.extend_from_slice(&sig.to_le_bytes());
    out.extend_from_slice(&(ids.len() as u32).to_le_bytes());
    for id in ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    out
}

pub fn write_tseq_all(vocab: &UnifiedVocab, seqs: &[TokenSequence]) -> Vec<u8> {
    let sig = vocab.signature();
    seqs.iter().flat_map(|s| write_tseq(sig, &s.ids)).collect()
}

/// Reads one record, returning `(vocab_sig, ids, bytes consumed)`.
pub fn read_tseq(bytes: &[u8]) -> Result<(u64, Vec<u32>, usize)> {
    if bytes.len() < TSEQ_HEADER {
        return Err(Error::Truncated {
            what: "TSEQ header".into(),
            expected: TSEQ_HEADER,
            actual: bytes.len(),
        });
    }
    if &bytes[..4] != TSEQ_MAGIC {
        return Err(Error::Format("not a TSEQ record (bad magic)".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != TSEQ_VERSION {
        return Err(Error::Format(format!("unsupported TSEQ version {version}")));
    }
    let sig = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
    let count = u32::from_le_bytes(bytes[14..18].try_into().unwrap()) as usize;
    let body = &bytes[TSEQ_HEADER..];
    let need = count
        .checked_mul(4)
        .ok_or_else(|| Error::Format("TSEQ count overflows".into()))?;
    if body.len() < need {
        return Err(Error::Truncated {
            what: "TSEQ ids".into(),
            expected: need,
            actual: body.len(),
        });
    }
    let ids = body[..need]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((sig, ids, TSEQ_HEADER + need))
}

/// Reads every record of a TSEQ file against `vocab`.
pub fn read_tseq_all(vocab: &UnifiedVocab, mut bytes: &[u8]) -> Result<Vec<TokenSequence>> {
    let want = vocab.signature();
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let (sig, ids, used) = read_tseq(bytes)?;
        if sig != want {
            return Err(Error::Format(format!(
                "record {}: vocabulary signature {sig:016x} does not match {want:016x}",
                out.len()
            )));
        }
        out.push(TokenSequence::from_ids(vocab, ids)?);
        bytes = &bytes[used..];
    }
    Ok(out)
}

/// Reads a token file by extension: `.jsonl`/`.json` or TSEQ otherwise.
pub fn load_tokens(path: &Path, vocab: &UnifiedVocab) -> Result<Vec<TokenSequence>> {
    let bytes = std::fs::read(path)?;
    if is_jsonl(path) {
        read_jsonl(vocab, std::str::from_utf8(&bytes).map_err(|e| Error::Format(e.to_string()))?)
    } else {
        read_tseq_all(vocab, &bytes)
    }
}

pub fn save_tokens(path: &Path, vocab: &UnifiedVocab, seqs: &[TokenSequence]) -> Result<()> {
    let bytes = if is_jsonl(path) {
        write_jsonl(vocab, seqs)?
    } else {
        write_tseq_all(vocab, seqs)
    };
    std::fs::write(path, bytes)?;
    Ok(())
}

fn is_jsonl(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("jsonl") | Some("json"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyframeConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub kmeans_iters: usize,
}

impl Default for KeyframeConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            patch_size: 28,
            kmeans_iters: 10,
        }
    }
}

impl KeyframeConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "patch size {} must divide image size {}",
                self.patch_size, self.image_size
            )));
        }
        Ok(())
    }
}

/// Fixed-grid patch quantizer over luma standing in for a learned image tokenizer.
#[derive(Debug, Clone, PartialEq)]
pub struct StubKeyframeTokenizer {
    pub cfg: KeyframeConfig,
    pub codebook: Option<Codebook>,
}

impl StubKeyframeTokenizer {
    pub fn new(cfg: KeyframeConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, codebook: None })
    }

    /// Patches of the frame resized to `image_size`, scaled to `[0, 1]`.
    pub fn patches(&self, frame: &Frame) -> Vec<f32> {
        let luma = frame.luma().resize(self.cfg.image_size, self.cfg.image_size);
        self.patches_of(&luma)
    }

    fn patches_of(&self, luma: &Luma) -> Vec<f32> {
        let (p, g) = (self.cfg.patch_size, self.cfg.grid());
        let mut out = Vec::with_capacity(luma.data.len());
        for gy in 0..g {
            for gx in 0..g {
                for y in 0..p {
                    for x in 0..p {
                        out.push(luma.at(gy * p + y, gx * p + x) as f32 / 255.0);
                    }
                }
            }
        }
        out
    }

    /// Lloyd's k-means over patches of `frames`, seeded from distinct random patches.
    pub fn fit(&mut self, frames: &[Frame], k: usize, rng: &mut impl Rng) -> Result<()> {
        if frames.is_empty() || k == 0 {
            return Err(Error::Contract("fitting needs frames and a positive codebook size".into()));
        }
        let d = self.cfg.patch_size * self.cfg.patch_size;
        let data: Vec<f32> = frames.iter().flat_map(|f| self.patches(f)).collect();
        let n = data.len() / d;
        let picks: Vec<usize> = if n >= k {
            sample(rng, n, k).into_vec()
        } else {
            (0..k).map(|i| if i < n { i } else { rng.random_range(0..n) }).collect()
        };
        let init: Vec<f32> = picks.iter().flat_map(|&i| data[i * d..(i + 1) * d].to_vec()).collect();
        let mut cb = Codebook::from_codes(k, d, init, Metric::Euclidean, 1.0)?;
        for _ in 0..self.cfg.kmeans_iters {
            let ids = cb.quantize_batch(&data)?;
            let mut sums = vec![0.0f64; k * d];
            let mut counts = vec![0usize; k];
            for (&id, row) in ids.iter().zip(data.chunks(d)) {
                counts[id] += 1;
                for (s, &v) in sums[id * d..(id + 1) * d].iter_mut().zip(row) {
                    *s += v as f64;
                }
            }
            let mut codes = cb.codes().to_vec();
            for c in 0..k {
                if counts[c] > 0 {
                    for j in 0..d {
                        codes[c * d + j] = (sums[c * d + j] / counts[c] as f64) as f32;
                    }
                }
            }
            cb = Codebook::from_codes(k, d, codes, Metric::Euclidean, 1.0)?;
        }
        self.codebook = Some(cb);
        Ok(())
    }

    fn fitted(&self) -> Result<&Codebook> {
        self.codebook
            .as_ref()
            .ok_or_else(|| Error::NotFitted("keyframe tokenizer has no codebook; fit it first".into()))
    }

    /// Codebook indices, one per patch in raster order.
    pub fn tokenize_local(&self, frame: &Frame) -> Result<Vec<usize>> {
        self.fitted()?.quantize_batch(&self.patches(frame))
    }

    /// Visual-range unified ids.
    pub fn tokenize(&self, frame: &Frame, vocab: &UnifiedVocab) -> Result<Vec<u32>> {
        let cb = self.fitted()?;
        if cb.k > vocab.visual_size as usize {
            return Err(Error::Config(format!(
                "keyframe codebook of {} exceeds visual vocabulary {}",
                cb.k, vocab.visual_size
            )));
        }
        self.tokenize_local(frame)?
            .into_iter()
            .map(|i| vocab.visual_id(i))
            .collect()
    }

    /// Image assembled from the patch codes of `ids` (visual-range unified ids).
    pub fn reconstruct(&self, ids: &[u32], vocab: &UnifiedVocab) -> Result<Luma> {
        let cb = self.fitted()?;
        let (p, g, s) = (self.cfg.patch_size, self.cfg.grid(), self.cfg.image_size);
        if ids.len() != g * g {
            return Err(Error::Shape(format!("expected {} keyframe tokens, got {}", g * g, ids.len())));
        }
        let mut data = vec![0u8; s * s];
        for (i, &id) in ids.iter().enumerate() {
            let local = match vocab.local_index(id) {
                Some((Modality::Visual, l)) if l < cb.k => l,
                _ => {
                    return Err(Error::Vocab {
                        index: i,
                        message: format!("id {id} is not a keyframe code"),
                    })
                }
            };
            let code = cb.code(local);
            let (gy, gx) = (i / g, i % g);
            for y in 0..p {
                for x in 0..p {
                    let v = (code[y * p + x] * 255.0).round().clamp(0.0, 255.0) as u8;
                    data[(gy * p + y) * s + gx * p + x] = v;
                }
            }
        }
        Ok(Luma {
            width: s,
            height: s,
            data,
        })
    }

    pub fn to_tensors(&self) -> Result<Vec<(String, Tensor)>> {
        let cb = self.fitted()?;
        let mut out = vec![(
            "meta.keyframe_json".to_string(),
            motok_tensor::checkpoint::text_tensor(&serde_json::to_string(&self.cfg)?),
        )];
        out.extend(cb.to_tensors("keyframe"));
        Ok(out)
    }

    pub fn from_tensors(tensors: &[(String, Tensor)]) -> Result<Self> {
        let meta = tensors
            .iter()
            .find(|(n, _)| n == "meta.keyframe_json")
            .ok_or_else(|| Error::Format("checkpoint has no keyframe tokenizer config".into()))?;
        let cfg: KeyframeConfig = serde_json::from_str(&motok_tensor::checkpoint::tensor_text(&meta.1)?)?;
        cfg.validate()?;
        let cb = Codebook::from_tensors("keyframe", tensors, Metric::Euclidean, 1.0)?;
        if cb.d != cfg.patch_size * cfg.patch_size {
            return Err(Error::Format("keyframe code width disagrees with patch size".into()));
        }
        Ok(Self {
            cfg,
            codebook: Some(cb),
        })
    }
}
