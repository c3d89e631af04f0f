//! 8-bit RGB images on disk (PNG, or binary PPM by extension) to and from
//! `[3,H,W]` tensors in `[0,1]`.

use std::path::Path;

use bladapt_core::{Scalar, Tensor};
use image::{ImageError, RgbImage};

use crate::error::{CliError, Result};

pub fn to_u8(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Pack a `[3,H,W]`, `[1,H,W]` or `[H,W]` tensor into interleaved RGB
/// bytes. Single-channel input is replicated; values are clamped.
pub fn to_rgb8<S: Scalar>(t: &Tensor<S>) -> Result<RgbImage> {
    let (c, h, w) = match *t.shape() {
        [c, h, w] if c == 1 || c == 3 => (c, h, w),
        [h, w] => (1, h, w),
        _ => return Err(CliError::Validation(format!("cannot save tensor of shape {:?} as an image", t.shape()))),
    };
    let d = t.data();
    let plane = h * w;
    let mut buf = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            let src = if c == 1 { i } else { ch * plane + i };
            buf.push(to_u8(d[src].as_f64()));
        }
    }
    RgbImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| CliError::Validation(String::from("image buffer size mismatch")))
}

pub fn from_rgb8<S: Scalar>(img: &RgbImage) -> Tensor<S> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let raw = img.as_raw();
    Tensor::from_fn([3, h, w], |i| {
        let (ch, p) = (i / plane, i % plane);
        S::lit(raw[3 * p + ch] as f64 / 255.0)
    })
}

fn map_image_err(path: &Path, e: ImageError) -> CliError {
    match e {
        ImageError::IoError(io) => CliError::io(path, io),
        other => CliError::format(path, other.to_string()),
    }
}

pub fn save_image<S: Scalar>(path: &Path, t: &Tensor<S>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    to_rgb8(t)?.save(path).map_err(|e| map_image_err(path, e))
}

pub fn load_image<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    if !path.exists() {
        return Err(CliError::Missing {
            what: "image",
            path: path.to_path_buf(),
            hint: "rerun `bladapt gen`",
        });
    }
    // Decode from memory so a short file reports as malformed, not as I/O.
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let format = image::ImageFormat::from_path(path).map_err(|e| CliError::format(path, e.to_string()))?;
    let img = image::load_from_memory_with_format(&bytes, format).map_err(|e| CliError::format(path, e.to_string()))?;
    Ok(from_rgb8(&img.to_rgb8()))
}
