//! Image containers: 8-bit PNG and the raw `.bin` f32 container
//! (`"FSEM"`, then `u32` C, H, W little-endian, then CHW f32 values).

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::imageops::FilterType;
use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::gradcore::Tensor;

pub const BIN_MAGIC: &[u8; 4] = b"FSEM";

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Encode a `3×H×W` tensor in `[0, 1]` as PNG bytes.
pub fn encode_png(image: &Tensor) -> Result<Vec<u8>> {
    let [c, h, w] = image.shape()[..] else {
        return Err(Error::contract(format!("expected 3×H×W, got {:?}", image.shape())));
    };
    if c != 3 {
        return Err(Error::contract("PNG export needs 3 channels"));
    }
    let d = image.data();
    let plane = h * w;
    let buf: Vec<u8> = (0..plane)
        .flat_map(|i| (0..3).map(move |ch| (d[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    let img = RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer size");
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::contract(format!("png encode: {e}")))?;
    Ok(out.into_inner())
}

pub fn encode_bin(image: &Tensor) -> Result<Vec<u8>> {
    let [c, h, w] = image.shape()[..] else {
        return Err(Error::contract(format!("expected C×H×W, got {:?}", image.shape())));
    };
    let mut out = Vec::with_capacity(16 + 4 * image.len());
    out.extend_from_slice(BIN_MAGIC);
    for v in [c, h, w] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_bin(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < 16 || &bytes[..4] != BIN_MAGIC {
        return Err(format_err(path, "missing FSEM header"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let n = c * h * w;
    if bytes.len() != 16 + 4 * n {
        return Err(format_err(path, format!("expected {} payload bytes, found {}", 4 * n, bytes.len() - 16)));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Tensor::new(&[c, h, w], data)
}

/// Load an image file as `3×size×size` in `[0, 1]`, resampling bilinearly
/// when the stored size differs.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "bin") {
        let t = decode_bin(&bytes, path)?;
        if t.shape() != [3, size, size] {
            return Err(format_err(path, format!("shape {:?} does not match size {size}", t.shape())));
        }
        return Ok(t);
    }
    let img = image::load_from_memory(&bytes).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut rgb = img.to_rgb8();
    if rgb.width() as usize != size || rgb.height() as usize != size {
        rgb = image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle);
    }
    let plane = size * size;
    let raw = rgb.into_raw();
    Ok(Tensor::from_fn(&[3, size, size], |i| {
        let (c, p) = (i / plane, i % plane);
        raw[p * 3 + c] as f32 / 255.0
    }))
}
