//! IMGF raster container and 16-bit PGM export.
//!
//! IMGF layout (little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 0–3   | magic `IMGF` |
//! | 4–7   | width, u32 |
//! | 8–11  | height, u32 |
//! | 12–15 | channel count, u32 (always 1) |
//! | 16–   | width·height f32 values, row-major, top-left origin |
//!
//! Masks (0/1) and atlases (0–8) use the same container and are validated on read.

use std::fs;
use std::path::Path;

use super::{Atlas, Image, Mask};
use crate::error::{Error, Result};

pub const IMGF_MAGIC: &[u8; 4] = b"IMGF";
const HEADER_LEN: usize = 16;

/// Encodes an image as IMGF bytes. Values are stored as `f32`.
pub fn encode_imgf(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * img.len());
    out.extend_from_slice(IMGF_MAGIC);
    out.extend_from_slice(&(img.width() as u32).to_le_bytes());
    out.extend_from_slice(&(img.height() as u32).to_le_bytes());
    out.extend_from_slice(&1u32.to_le_bytes());
    for &v in img.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_imgf(bytes: &[u8], path: &Path) -> Result<Image> {
    if bytes.len() < 4 || &bytes[..4] != IMGF_MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedPayload { path: path.to_path_buf(), expected: HEADER_LEN, found: bytes.len() });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (width, height, channels) = (word(4), word(8), word(12));
    if width == 0 || height == 0 {
        return Err(Error::BadHeader { path: path.to_path_buf(), reason: format!("zero dimension {width}x{height}") });
    }
    if channels != 1 {
        return Err(Error::BadHeader { path: path.to_path_buf(), reason: format!("{channels} channels") });
    }
    let expected = HEADER_LEN + 4 * width * height;
    if bytes.len() < expected {
        return Err(Error::TruncatedPayload { path: path.to_path_buf(), expected, found: bytes.len() });
    }
    let data =
        bytes[HEADER_LEN..expected].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Image::new(width, height, data)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_imgf(&bytes, path)
}

pub fn write_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_imgf(img)).map_err(|e| Error::io(path, e))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    decode_mask(&fs::read(path).map_err(|e| Error::io(path, e))?, path)
}

/// Decodes a 0/1 mask; any other stored value is rejected.
pub fn decode_mask(bytes: &[u8], path: &Path) -> Result<Mask> {
    let img = decode_imgf(bytes, path)?;
    let mut data = Vec::with_capacity(img.len());
    for &v in img.data() {
        data.push(match v {
            0.0 => false,
            1.0 => true,
            other => return Err(Error::BadHeader { path: path.to_path_buf(), reason: format!("mask value {other}") }),
        });
    }
    Mask::new(img.width(), img.height(), data)
}

pub fn encode_mask(mask: &Mask) -> Vec<u8> {
    let data = mask.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    encode_imgf(&Image::new(mask.width(), mask.height(), data).unwrap())
}

pub fn write_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_mask(mask)).map_err(|e| Error::io(path, e))
}

pub fn read_atlas(path: impl AsRef<Path>) -> Result<Atlas> {
    let path = path.as_ref();
    decode_atlas(&fs::read(path).map_err(|e| Error::io(path, e))?, path)
}

/// Decodes an atlas; labels must be integers in 0..=8.
pub fn decode_atlas(bytes: &[u8], path: &Path) -> Result<Atlas> {
    let img = decode_imgf(bytes, path)?;
    let mut labels = Vec::with_capacity(img.len());
    for &v in img.data() {
        if v.fract() != 0.0 || !(0.0..=8.0).contains(&v) {
            return Err(Error::BadHeader { path: path.to_path_buf(), reason: format!("atlas value {v}") });
        }
        labels.push(v as u8);
    }
    Atlas::new(img.width(), img.height(), labels)
}

pub fn encode_atlas(atlas: &Atlas) -> Vec<u8> {
    let data = atlas.labels().iter().map(|&l| l as f64).collect();
    encode_imgf(&Image::new(atlas.width(), atlas.height(), data).unwrap())
}

pub fn write_atlas(atlas: &Atlas, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_atlas(atlas)).map_err(|e| Error::io(path, e))
}

/// Gray level for `v` under the window `[lo, hi]`, rounding half up.
pub fn pgm_level(v: f64, lo: f64, hi: f64) -> u16 {
    let u = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    (65535.0 * u + 0.5).floor() as u16
}

/// Binary (P5) 16-bit PGM with big-endian samples.
pub fn encode_pgm(img: &Image, lo: f64, hi: f64) -> Result<Vec<u8>> {
    if !(lo < hi) {
        return Err(Error::InvalidArgument(format!("pgm window lo={lo} must be below hi={hi}")));
    }
    let mut out = format!("P5\n{} {}\n65535\n", img.width(), img.height()).into_bytes();
    for &v in img.data() {
        out.extend_from_slice(&pgm_level(v, lo, hi).to_be_bytes());
    }
    Ok(out)
}

pub fn export_pgm(img: &Image, lo: f64, hi: f64, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(img, lo, hi)?).map_err(|e| Error::io(path, e))
}
