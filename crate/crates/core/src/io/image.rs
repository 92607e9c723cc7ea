//! 8-bit RGB rasters as `(3, W, H)` tensors in `[0, 1]`: binary PPM (P6) and PNG.

use std::path::Path;

use super::{read_file, write_atomic};
use crate::error::{Error, Result};
use crate::tensor::{Shape3, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Ppm,
    Png,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        match ext.as_deref() {
            Some("ppm" | "pnm") => Ok(ImageFormat::Ppm),
            Some("png") => Ok(ImageFormat::Png),
            _ => Err(Error::format(path, "unsupported image format (expected .ppm or .png)")),
        }
    }

    fn sniff(bytes: &[u8]) -> Option<Self> {
        if bytes.starts_with(b"P6") {
            Some(ImageFormat::Ppm)
        } else if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
            Some(ImageFormat::Png)
        } else {
            None
        }
    }
}

fn to_byte(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn check_rgb(t: &Tensor3) -> Result<()> {
    let s = t.shape();
    if s.c != 3 || s.w == 0 || s.h == 0 {
        return Err(Error::shape("save_image", s, "(3, W, H) with W, H ≥ 1"));
    }
    Ok(())
}

/// Interleaved RGB bytes, row by row (`h` is the row index).
fn interleave(t: &Tensor3) -> Vec<u8> {
    let s = t.shape();
    let mut out = Vec::with_capacity(3 * s.w * s.h);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                out.push(to_byte(t.get(c, x, y)));
            }
        }
    }
    out
}

fn deinterleave(width: usize, height: usize, pixel: impl Fn(usize, usize, usize) -> f32) -> Tensor3 {
    Tensor3::from_fn(Shape3::new(3, width, height), |c, x, y| pixel(c, x, y))
}

pub fn encode_ppm(t: &Tensor3) -> Result<Vec<u8>> {
    check_rgb(t)?;
    let s = t.shape();
    let mut out = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.extend(interleave(t));
    Ok(out)
}

/// Parses a binary PPM. Samples are divided by the declared maxval; maxval
/// above 255 uses two big-endian bytes per sample.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor3> {
    let bad = |msg: &str| Error::format(path, format!("PPM: {msg}"));
    if !bytes.starts_with(b"P6") {
        return Err(bad("missing P6 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Whitespace and comments before each header field.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("expected a decimal number in header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("header number out of range"))?;
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("truncated header"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(bad("zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(bad("maxval must be in 1..=65535"));
    }
    let bps = if maxval > 255 { 2 } else { 1 };
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3 * bps))
        .ok_or_else(|| bad("image too large"))?;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(bad(&format!("raster has {} bytes, expected {need}", raster.len())));
    }
    let maxf = maxval as f32;
    Ok(deinterleave(width, height, |c, x, y| {
        let i = (y * width + x) * 3 + c;
        let v = if bps == 1 {
            raster[i] as u32
        } else {
            u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]) as u32
        };
        v.min(maxval as u32) as f32 / maxf
    }))
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<Tensor3> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, format!("PNG: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(deinterleave(w, h, |c, x, y| raw[(y * w + x) * 3 + c] as f32 / 255.0))
}

fn encode_png(t: &Tensor3, path: &Path) -> Result<Vec<u8>> {
    use image::ImageEncoder;
    check_rgb(t)?;
    let s = t.shape();
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(&interleave(t), s.w as u32, s.h as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::format(path, format!("PNG: {e}")))?;
    Ok(out)
}

/// Loads a PPM or PNG file (detected from its content) as `(3, W, H)` in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor3> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    match ImageFormat::sniff(&bytes) {
        Some(ImageFormat::Ppm) => decode_ppm(&bytes, path),
        Some(ImageFormat::Png) => decode_png(&bytes, path),
        None => Err(Error::format(path, "unsupported image format (expected PPM P6 or PNG)")),
    }
}

/// Saves `(3, W, H)` values as 8-bit RGB, format chosen by extension.
pub fn save_image(path: impl AsRef<Path>, image: &Tensor3) -> Result<()> {
    let path = path.as_ref();
    let bytes = match ImageFormat::from_path(path)? {
        ImageFormat::Ppm => encode_ppm(image)?,
        ImageFormat::Png => encode_png(image, path)?,
    };
    write_atomic(path, &bytes)
}
