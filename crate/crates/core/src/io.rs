//! File formats: 8-bit PNG images and masks, RSFT tensors, JSON documents.
//!
//! An RSFT tensor is the ASCII magic `RSFT`, then `C`, `H`, `W` as
//! little-endian `u32`, then `C * H * W` little-endian `f32` values, one
//! row-major plane per channel.

use std::fs;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageReader, RgbImage};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::correlation::FeatureMap;
use crate::error::{Error, Result};
use crate::raster::{ImageBuffer, ScalarMap};

pub const RSFT_MAGIC: &[u8; 4] = b"RSFT";

/// Channel-major tensor as stored in an RSFT file.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

pub fn encode_rsft(t: &Tensor) -> Result<Vec<u8>> {
    if t.data.len() != t.channels * t.height * t.width {
        return Err(Error::DimensionMismatch(format!(
            "{} values for a {}x{}x{} tensor",
            t.data.len(),
            t.channels,
            t.height,
            t.width
        )));
    }
    let dim = |v: usize| u32::try_from(v).map_err(|_| Error::DimensionMismatch(format!("tensor dimension {v} too large")));
    let mut out = Vec::with_capacity(16 + 4 * t.data.len());
    out.extend_from_slice(RSFT_MAGIC);
    for d in [t.channels, t.height, t.width] {
        out.extend_from_slice(&dim(d)?.to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parse RSFT bytes; `path` only labels errors.
pub fn decode_rsft(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < 16 || &bytes[..4] != RSFT_MAGIC {
        return Err(Error::format(path, "not an RSFT tensor (bad magic or short header)"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (channels, height, width) = (word(0), word(1), word(2));
    let n = channels
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| Error::format(path, "tensor dimensions overflow"))?;
    let body = &bytes[16..];
    if body.len() != 4 * n {
        return Err(Error::format(
            path,
            format!("expected {} payload bytes for {channels}x{height}x{width}, found {}", 4 * n, body.len()),
        ));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok(Tensor { channels, height, width, data })
}

pub fn read_rsft(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_rsft(&bytes, path)
}

pub fn write_rsft(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_rsft(t)?).map_err(|e| Error::io(path, e))
}

/// Single-channel tensor as a raster (e.g. an external saliency map).
pub fn read_scalar_map(path: &Path) -> Result<ScalarMap> {
    let t = read_rsft(path)?;
    if t.channels != 1 {
        return Err(Error::format(path, format!("expected 1 channel, found {}", t.channels)));
    }
    ScalarMap::new(t.width, t.height, t.data.iter().map(|&v| v as f64).collect())
}

pub fn write_scalar_map(path: &Path, m: &ScalarMap) -> Result<()> {
    let data = m.data().iter().map(|&v| v as f32).collect();
    write_rsft(path, &Tensor { channels: 1, height: m.height(), width: m.width(), data })
}

/// Descriptor grid from a tensor; cells are rescaled to unit length.
pub fn read_feature_map(path: &Path) -> Result<FeatureMap> {
    let t = read_rsft(path)?;
    let planes: Vec<f64> = t.data.iter().map(|&v| v as f64).collect();
    FeatureMap::from_planar(t.channels, t.width, t.height, &planes).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_feature_map(path: &Path, f: &FeatureMap) -> Result<()> {
    let data = f.to_planar().iter().map(|&v| v as f32).collect();
    write_rsft(path, &Tensor { channels: f.channels(), height: f.height(), width: f.width(), data })
}

/// Read a PNG as values in `[0, 1]`: grey images give one channel,
/// everything else three (alpha is dropped).
pub fn read_image(path: &Path) -> Result<ImageBuffer> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| Error::io(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::format(path, "image has no pixels"));
    }
    let grey = matches!(img, DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLumaA16(_));
    if grey {
        let g = img.to_luma8();
        ImageBuffer::new(w, h, 1, g.as_raw().iter().map(|&v| v as f64 / 255.0).collect())
    } else {
        let rgb = img.to_rgb8();
        let raw = rgb.as_raw();
        Ok(ImageBuffer::from_fn(w, h, 3, |c, x, y| raw[(y * w + x) * 3 + c] as f64 / 255.0))
    }
}

#[inline]
fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write 1-channel images as grey and others as RGB from their first three
/// channels (two-channel images repeat the first).
pub fn write_image(path: &Path, img: &ImageBuffer) -> Result<()> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let result = if img.channels() == 1 {
        GrayImage::from_fn(w, h, |x, y| image::Luma([to_u8(img.get(0, x as usize, y as usize))])).save(path)
    } else {
        let ch = |k: usize| if k < img.channels() { k } else { 0 };
        RgbImage::from_fn(w, h, |x, y| {
            let (x, y) = (x as usize, y as usize);
            image::Rgb([0, 1, 2].map(|k| to_u8(img.get(ch(k), x, y))))
        })
        .save(path)
    };
    result.map_err(|e| Error::io(path, e))
}

/// Masks are written as 0/255 grey PNGs.
pub fn write_mask(path: &Path, mask: &ScalarMap) -> Result<()> {
    let (w, h) = (mask.width() as u32, mask.height() as u32);
    GrayImage::from_fn(w, h, |x, y| image::Luma([if mask.get(x as usize, y as usize) > 0.5 { 255 } else { 0 }]))
        .save(path)
        .map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Config(format!("json: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json_string(value)?).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}
