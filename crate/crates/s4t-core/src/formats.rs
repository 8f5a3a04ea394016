//! Byte-level codecs for the artifact's file formats: the binary tensor
//! container (single-tensor and named-entry checkpoint variants), binary
//! PPM/PGM images, and the dataset manifest. Everything here works on byte
//! buffers; filesystem access lives in the companion crate.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::mathf;
use crate::tensor::{LabelMap, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"S4TT";
pub const FORMAT_VERSION: u8 = 1;

/// Decode failure carrying the byte offset where parsing stopped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormatError {
    pub offset: usize,
    pub message: String,
}

impl core::fmt::Display for FormatError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "byte {}: {}", self.offset, self.message)
    }
}

#[cfg(feature = "std")]
impl std::error::Error for FormatError {}

fn err<T>(offset: usize, message: impl Into<String>) -> Result<T, FormatError> {
    Err(FormatError { offset, message: message.into() })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return err(
                self.pos,
                format!("truncated {what}: expected {n} bytes, found {}", self.remaining()),
            );
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16_le(&mut self, what: &str) -> Result<u16, FormatError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32_le(&mut self, what: &str) -> Result<u32, FormatError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn check_header(cur: &mut Cursor) -> Result<(), FormatError> {
    let magic = cur.take(4, "magic")?;
    if magic != TENSOR_MAGIC {
        return err(0, format!("bad magic {magic:?}, expected {TENSOR_MAGIC:?}"));
    }
    let version = cur.u8("version")?;
    if version != FORMAT_VERSION {
        return err(4, format!("unsupported version {version}, expected {FORMAT_VERSION}"));
    }
    Ok(())
}

// rank u8, dims u32 LE each, payload f32 LE; shared by both variants.
fn write_tensor_body(out: &mut Vec<u8>, t: &Tensor) {
    assert!(t.rank() <= u8::MAX as usize, "rank exceeds the container limit");
    out.push(t.rank() as u8);
    for &d in t.shape() {
        assert!(d <= u32::MAX as usize, "dimension exceeds the container limit");
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_tensor_body(cur: &mut Cursor) -> Result<Tensor, FormatError> {
    let rank = cur.u8("rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut numel = 1u64;
    for _ in 0..rank {
        let d = cur.u32_le("dimension")? as u64;
        numel = numel.saturating_mul(d);
        shape.push(d as usize);
    }
    let payload = (numel as usize).saturating_mul(4);
    if cur.remaining() < payload {
        return err(
            cur.pos,
            format!("truncated payload: expected {payload} bytes, found {}", cur.remaining()),
        );
    }
    let raw = cur.take(payload, "payload")?;
    let mut data = Vec::with_capacity(numel as usize);
    for chunk in raw.chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    Ok(Tensor::from_vec(&shape, data))
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(FORMAT_VERSION);
    write_tensor_body(&mut out, t);
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor, FormatError> {
    let mut cur = Cursor::new(bytes);
    check_header(&mut cur)?;
    let t = read_tensor_body(&mut cur)?;
    if cur.remaining() > 0 {
        return err(cur.pos, format!("{} trailing bytes after payload", cur.remaining()));
    }
    Ok(t)
}

/// Checkpoint variant: each entry is (u16 LE name length, UTF-8 name, tensor
/// body), repeated to end of buffer.
pub fn encode_checkpoint(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(FORMAT_VERSION);
    for (name, t) in entries {
        assert!(name.len() <= u16::MAX as usize, "name exceeds the container limit");
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        write_tensor_body(&mut out, t);
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, FormatError> {
    let mut cur = Cursor::new(bytes);
    check_header(&mut cur)?;
    let mut entries = Vec::new();
    while cur.remaining() > 0 {
        let name_len = cur.u16_le("entry name length")? as usize;
        let name_pos = cur.pos;
        let raw = cur.take(name_len, "entry name")?;
        let name = match core::str::from_utf8(raw) {
            Ok(s) => s.to_string(),
            Err(_) => return err(name_pos, "entry name is not valid UTF-8"),
        };
        let t = read_tensor_body(&mut cur)?;
        entries.push((name, t));
    }
    Ok(entries)
}

// Text header fields separated by whitespace, '#' comments allowed, one
// whitespace byte before the payload.
fn read_netpbm_field(cur: &mut Cursor, what: &str) -> Result<u32, FormatError> {
    loop {
        let b = cur.u8(what)?;
        if b == b'#' {
            while cur.u8(what)? != b'\n' {}
            continue;
        }
        if b.is_ascii_whitespace() {
            continue;
        }
        if !b.is_ascii_digit() {
            return err(cur.pos - 1, format!("expected digit in {what}, found byte {b}"));
        }
        let mut value = (b - b'0') as u64;
        loop {
            let b = cur.u8(what)?;
            if b.is_ascii_whitespace() {
                if value > u32::MAX as u64 {
                    return err(cur.pos - 1, format!("{what} out of range"));
                }
                return Ok(value as u32);
            }
            if !b.is_ascii_digit() {
                return err(cur.pos - 1, format!("expected digit in {what}, found byte {b}"));
            }
            value = value * 10 + (b - b'0') as u64;
            if value > u32::MAX as u64 {
                return err(cur.pos - 1, format!("{what} out of range"));
            }
        }
    }
}

/// Binary PPM from a [3,H,W] tensor of values in [0,1], quantized to 8 bits.
pub fn encode_ppm(img: &Tensor) -> Vec<u8> {
    assert_eq!(img.rank(), 3, "image must be [3,H,W]");
    assert_eq!(img.dim(0), 3, "image must have 3 channels");
    let (h, w) = (img.dim(1), img.dim(2));
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..h {
        for j in 0..w {
            for ch in 0..3 {
                let v = img.at3(ch, i, j).clamp(0.0, 1.0);
                out.push(mathf::roundf(v * 255.0) as u8);
            }
        }
    }
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor, FormatError> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.take(2, "magic")?;
    if magic != b"P6" {
        return err(0, format!("bad magic {magic:?}, expected b\"P6\""));
    }
    let w = read_netpbm_field(&mut cur, "width")? as usize;
    let h = read_netpbm_field(&mut cur, "height")? as usize;
    let maxval = read_netpbm_field(&mut cur, "maxval")?;
    if maxval != 255 {
        return err(cur.pos, format!("unsupported maxval {maxval}, expected 255"));
    }
    let raw = cur.take(3 * h * w, "pixel payload")?;
    if cur.remaining() > 0 {
        return err(cur.pos, format!("{} trailing bytes after payload", cur.remaining()));
    }
    let mut img = Tensor::zeros(&[3, h, w]);
    for i in 0..h {
        for j in 0..w {
            for ch in 0..3 {
                let v = raw[(i * w + j) * 3 + ch] as f32 / 255.0;
                img.set3(ch, i, j, v);
            }
        }
    }
    Ok(img)
}

/// Binary PGM from a label map. `maxval` is the class ceiling (num_classes-1
/// for labels, 255 for binary maps scaled up); values above it are rejected.
pub fn encode_pgm(map: &LabelMap, maxval: u8) -> Vec<u8> {
    assert!(maxval >= 1, "maxval must be positive");
    let (h, w) = (map.h(), map.w());
    let mut out = format!("P5\n{w} {h}\n{maxval}\n").into_bytes();
    for &v in map.data() {
        assert!(v <= maxval, "label {v} exceeds maxval {maxval}");
        out.push(v);
    }
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<(LabelMap, u8), FormatError> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.take(2, "magic")?;
    if magic != b"P5" {
        return err(0, format!("bad magic {magic:?}, expected b\"P5\""));
    }
    let w = read_netpbm_field(&mut cur, "width")? as usize;
    let h = read_netpbm_field(&mut cur, "height")? as usize;
    let maxval = read_netpbm_field(&mut cur, "maxval")?;
    if maxval == 0 || maxval > 255 {
        return err(cur.pos, format!("unsupported maxval {maxval}"));
    }
    let payload_pos = cur.pos;
    let raw = cur.take(h * w, "pixel payload")?;
    if cur.remaining() > 0 {
        return err(cur.pos, format!("{} trailing bytes after payload", cur.remaining()));
    }
    for (k, &v) in raw.iter().enumerate() {
        if v as u32 > maxval {
            return err(payload_pos + k, format!("pixel value {v} exceeds maxval {maxval}"));
        }
    }
    Ok((LabelMap::from_vec(h, w, raw.to_vec()), maxval as u8))
}

/// Colorized label rendering for inspection: each class painted with its
/// palette color.
pub fn encode_label_ppm(map: &LabelMap, palette: &[[f32; 3]]) -> Vec<u8> {
    let (h, w) = (map.h(), map.w());
    let mut img = Tensor::zeros(&[3, h, w]);
    for i in 0..h {
        for j in 0..w {
            let color = palette[map.get(i, j) as usize];
            for ch in 0..3 {
                img.set3(ch, i, j, color[ch]);
            }
        }
    }
    encode_ppm(&img)
}

/// One dataset sample: an image path and an optional label path, as listed
/// in a manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: String,
    pub label: Option<String>,
}

/// Manifest text: one sample per line, `image.ppm<TAB>label.pgm` or a bare
/// image path; blank lines and `#` comment lines are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>, FormatError> {
    let mut entries = Vec::new();
    let mut offset = 0usize;
    for line in text.lines() {
        let line_offset = offset;
        offset += line.len() + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split('\t');
        let image = fields.next().unwrap().trim();
        let label = fields.next().map(|s| s.trim());
        if image.is_empty() {
            return err(line_offset, "manifest line has an empty image path");
        }
        if let Some(extra) = fields.next() {
            return err(line_offset, format!("unexpected third field {extra:?} in manifest line"));
        }
        entries.push(ManifestEntry {
            image: image.to_string(),
            label: label.filter(|s| !s.is_empty()).map(|s| s.to_string()),
        });
    }
    Ok(entries)
}

pub fn write_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&e.image);
        if let Some(lab) = &e.label {
            out.push('\t');
            out.push_str(lab);
        }
        out.push('\n');
    }
    out
}
