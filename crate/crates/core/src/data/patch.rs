//! Reflectance patches, label masks and their binary file formats.
//!
//! Patch file: magic `BAWP01\0\0`, `u32` extents `(C, H, W)`, then `C*H*W`
//! little-endian `f32`. Mask file: magic `BAWM01\0\0`, `u32` extents
//! `(H, W)`, then `H*W` bytes.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{io_err, CoreError, Result};

pub const BANDS: usize = 5;
pub const BAND_NAMES: [&str; BANDS] = ["blue", "green", "red", "red_edge", "nir"];
pub const BLUE: usize = 0;
pub const GREEN: usize = 1;
pub const RED: usize = 2;
pub const RED_EDGE: usize = 3;
pub const NIR: usize = 4;

pub const OTHER: u8 = 0;
pub const CROP: u8 = 1;
pub const WEED: u8 = 2;
pub const IGNORE: u8 = 255;
pub const NUM_CLASSES: usize = 3;

pub const PATCH_MAGIC: &[u8; 8] = b"BAWP01\0\0";
pub const MASK_MAGIC: &[u8; 8] = b"BAWM01\0\0";
pub const GRID_MAGIC: &[u8; 8] = b"BAWG01\0\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Field {
    E2,
    E8,
}

impl Field {
    pub const ALL: [Field; 2] = [Field::E2, Field::E8];
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Field::E2 => "E2",
            Field::E8 => "E8",
        })
    }
}

impl FromStr for Field {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "E2" => Ok(Field::E2),
            "E8" => Ok(Field::E8),
            _ => Err(CoreError::Invalid(format!("unknown field `{s}`"))),
        }
    }
}

/// Season index; `Y0..=Y3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Year(pub u8);

impl Year {
    pub const ALL: [Year; 4] = [Year(0), Year(1), Year(2), Year(3)];
}

impl fmt::Display for Year {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Y{}", self.0)
    }
}

impl FromStr for Year {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        s.strip_prefix('Y')
            .and_then(|n| n.parse::<u8>().ok())
            .filter(|&n| n < 4)
            .map(Year)
            .ok_or_else(|| CoreError::Invalid(format!("unknown year `{s}`")))
    }
}

/// Five-band reflectance grid, band-major `[B, G, R, RE, NIR] x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultispectralPatch {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    pub block_id: u32,
    pub field: Field,
    pub year: Year,
}

impl MultispectralPatch {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != BANDS * height * width || height == 0 || width == 0 {
            return Err(CoreError::Invalid(format!(
                "patch data length {} does not match {BANDS}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
            block_id: 0,
            field: Field::E2,
            year: Year(0),
        })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn band(&self, b: usize) -> &[f32] {
        let n = self.pixels();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn band_mut(&mut self, b: usize) -> &mut [f32] {
        let n = self.pixels();
        &mut self.data[b * n..(b + 1) * n]
    }

    /// Reflectance of all bands at pixel `i`.
    pub fn pixel(&self, i: usize) -> [f32; BANDS] {
        let n = self.pixels();
        std::array::from_fn(|b| self.data[b * n + i])
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    pub height: usize,
    pub width: usize,
    pub codes: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, codes: Vec<u8>) -> Result<Self> {
        if codes.len() != height * width {
            return Err(CoreError::Invalid(format!(
                "mask length {} does not match {height}x{width}",
                codes.len()
            )));
        }
        if let Some(c) = codes
            .iter()
            .find(|&&c| !matches!(c, OTHER | CROP | WEED | IGNORE))
        {
            return Err(CoreError::Invalid(format!("invalid label code {c}")));
        }
        Ok(Self {
            height,
            width,
            codes,
        })
    }

    /// Pixel counts per code: `[other, crop, weed, ignore]`.
    pub fn histogram(&self) -> [usize; 4] {
        let mut h = [0; 4];
        for &c in &self.codes {
            h[match c {
                OTHER => 0,
                CROP => 1,
                WEED => 2,
                _ => 3,
            }] += 1;
        }
        h
    }
}

fn header(magic: &[u8; 8], extents: &[usize]) -> Vec<u8> {
    let mut out = magic.to_vec();
    for &e in extents {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    out
}

fn read_header<'a>(
    buf: &'a [u8],
    magic: &[u8; 8],
    n: usize,
    what: &str,
) -> Result<(Vec<usize>, &'a [u8])> {
    let fmt_err = |reason: &str| CoreError::Format {
        what: what.to_string(),
        reason: reason.to_string(),
    };
    if buf.len() < 8 || &buf[..8] != magic {
        return Err(fmt_err("bad magic or version"));
    }
    let need = 8 + 4 * n;
    if buf.len() < need {
        return Err(fmt_err("truncated header"));
    }
    let extents = buf[8..need]
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
        .collect();
    Ok((extents, &buf[need..]))
}

pub fn encode_patch(p: &MultispectralPatch) -> Vec<u8> {
    let mut out = header(PATCH_MAGIC, &[BANDS, p.height, p.width]);
    out.reserve(p.data.len() * 4);
    for v in &p.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_patch(buf: &[u8], what: &str) -> Result<MultispectralPatch> {
    let (ext, body) = read_header(buf, PATCH_MAGIC, 3, what)?;
    if ext[0] != BANDS {
        return Err(CoreError::Format {
            what: what.to_string(),
            reason: format!("expected {BANDS} bands, found {}", ext[0]),
        });
    }
    let n = ext[0] * ext[1] * ext[2];
    if body.len() != n * 4 {
        return Err(CoreError::Format {
            what: what.to_string(),
            reason: format!("expected {} data bytes, found {}", n * 4, body.len()),
        });
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    MultispectralPatch::new(ext[1], ext[2], data)
}

pub fn encode_mask(m: &LabelMask) -> Vec<u8> {
    let mut out = header(MASK_MAGIC, &[m.height, m.width]);
    out.extend_from_slice(&m.codes);
    out
}

pub fn decode_mask(buf: &[u8], what: &str) -> Result<LabelMask> {
    let (ext, body) = read_header(buf, MASK_MAGIC, 2, what)?;
    if body.len() != ext[0] * ext[1] {
        return Err(CoreError::Format {
            what: what.to_string(),
            reason: format!(
                "expected {} label bytes, found {}",
                ext[0] * ext[1],
                body.len()
            ),
        });
    }
    LabelMask::new(ext[0], ext[1], body.to_vec())
}

pub fn write_patch(path: &Path, p: &MultispectralPatch) -> Result<()> {
    std::fs::write(path, encode_patch(p)).map_err(io_err(path))
}

pub fn read_patch(path: &Path) -> Result<MultispectralPatch> {
    let buf = std::fs::read(path).map_err(io_err(path))?;
    decode_patch(&buf, &path.display().to_string())
}

pub fn write_mask(path: &Path, m: &LabelMask) -> Result<()> {
    std::fs::write(path, encode_mask(m)).map_err(io_err(path))
}

pub fn read_mask(path: &Path) -> Result<LabelMask> {
    let buf = std::fs::read(path).map_err(io_err(path))?;
    decode_mask(&buf, &path.display().to_string())
}

/// Per-pixel `f32` grid, e.g. the confidence map of an inference run.
pub fn encode_grid(height: usize, width: usize, values: &[f32]) -> Vec<u8> {
    let mut out = header(GRID_MAGIC, &[height, width]);
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_grid(buf: &[u8], what: &str) -> Result<(usize, usize, Vec<f32>)> {
    let (ext, body) = read_header(buf, GRID_MAGIC, 2, what)?;
    if body.len() != 4 * ext[0] * ext[1] {
        return Err(CoreError::Format {
            what: what.to_string(),
            reason: format!(
                "expected {} grid bytes, found {}",
                4 * ext[0] * ext[1],
                body.len()
            ),
        });
    }
    let values = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((ext[0], ext[1], values))
}
