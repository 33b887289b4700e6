//! File formats and atomic writes.
//!
//! Two formats carry pixel data between stages:
//!
//! * 8-bit lossless RGB PNG for rendered images,
//! * a raw float container (".bin") for ground-truth and offset tensors:
//!   a 16-byte header (magic `INTR`, u32 height, u32 width, u32 channels,
//!   all little-endian) followed by row-major little-endian f32 data.
//!
//! Every writer in this module goes through a temp-file-plus-rename so a
//! crashed run never leaves a half-written artifact behind.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use ndarray::{Array3, ArrayView3};
use sha2::{Digest, Sha256};

use crate::error::{LilError, Result};

pub const MAP_MAGIC: &[u8; 4] = b"INTR";

/// Serializes an (H, W, C) float map into the raw container format.
pub fn encode_f32_map(map: ArrayView3<f32>) -> Vec<u8> {
    let (h, w, c) = map.dim();
    let mut out = Vec::with_capacity(16 + h * w * c * 4);
    out.extend_from_slice(MAP_MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    for v in map.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_f32_map(bytes: &[u8], origin: &Path) -> Result<Array3<f32>> {
    if bytes.len() < 16 || &bytes[0..4] != MAP_MAGIC {
        return Err(LilError::format(origin, "missing INTR magic"));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = 16 + h * w * c * 4;
    if bytes.len() != expected {
        return Err(LilError::format(
            origin,
            format!("expected {expected} bytes for {h}x{w}x{c}, found {}", bytes.len()),
        ));
    }
    let data: Vec<f32> = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Array3::from_shape_vec((h, w, c), data)
        .map_err(|e| LilError::format(origin, e.to_string()))
}

pub fn write_f32_map(path: &Path, map: ArrayView3<f32>) -> Result<()> {
    atomic_write(path, &encode_f32_map(map))
}

pub fn read_f32_map(path: &Path) -> Result<Array3<f32>> {
    let bytes = fs::read(path).map_err(|e| LilError::io(path, e))?;
    decode_f32_map(&bytes, path)
}

/// Quantizes an (H, W, 3) image in [0, 1] to 8-bit RGB and writes a PNG.
pub fn write_png(path: &Path, image: ArrayView3<f32>) -> Result<()> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(LilError::Shape {
            expected: "(H, W, 3)".into(),
            got: format!("({h}, {w}, {c})"),
        });
    }
    let mut buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::new(w as u32, h as u32);
    for (y, x, px) in buf.enumerate_pixels_mut().map(|(x, y, p)| (y, x, p)) {
        let q = |ch: usize| {
            (image[(y as usize, x as usize, ch)].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        *px = Rgb([q(0), q(1), q(2)]);
    }
    let mut bytes: Vec<u8> = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| LilError::Image {
            path: path.to_path_buf(),
            source: e,
        })?;
    atomic_write(path, &bytes)
}

/// Reads an RGB PNG back into an (H, W, 3) float image in [0, 1].
pub fn read_png(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| LilError::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .into_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((h as usize, w as usize, 3));
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[(y as usize, x as usize, ch)] = px.0[ch] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// Writes `bytes` to `path` via a temp file in the same directory followed by
/// a rename, creating parent directories as needed.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| LilError::io(parent, e))?;
        }
    }
    let tmp = tmp_path(path);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| LilError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| LilError::io(&tmp, e))?;
        f.sync_all().map_err(|e| LilError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| LilError::io(path, e))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

pub fn write_json_atomic<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| LilError::format(path, e.to_string()))?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| LilError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| LilError::format(path, e.to_string()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| LilError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}
