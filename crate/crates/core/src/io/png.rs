//! PNG export and import.
//!
//! Colors are clamped to [0, 1] and quantized to 8 bits. Depth is written as
//! 16-bit grayscale, linear between the camera's near plane (0) and far
//! plane (65535); uncovered pixels are stored as 65535 and read back as
//! [`BACKGROUND_DEPTH`].

use std::path::Path;

use image::{GrayImage as Gray8, ImageBuffer, Luma, RgbImage as Rgb8};

use crate::error::{Error, Result};
use crate::render::{RgbImage, BACKGROUND_DEPTH};

pub fn to_rgb8(img: &RgbImage) -> Rgb8 {
    let bytes = img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    ImageBuffer::from_raw(img.width as u32, img.height as u32, bytes).expect("buffer matches dimensions")
}

pub fn from_rgb8(img: &Rgb8) -> RgbImage {
    RgbImage {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
    }
}

pub fn write_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    to_rgb8(img).save(path).map_err(|e| image_err(path, e))
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    Ok(from_rgb8(&img.to_rgb8()))
}

pub fn encode_depth(depth: &[f64], near: f64, far: f64) -> Vec<u16> {
    depth
        .iter()
        .map(|&d| {
            if !d.is_finite() {
                u16::MAX
            } else {
                ((d - near) / (far - near) * 65535.0).round().clamp(0.0, 65535.0) as u16
            }
        })
        .collect()
}

pub fn decode_depth(raw: &[u16], near: f64, far: f64) -> Vec<f64> {
    raw.iter()
        .map(|&v| {
            if v == u16::MAX {
                BACKGROUND_DEPTH
            } else {
                near + v as f64 / 65535.0 * (far - near)
            }
        })
        .collect()
}

pub fn write_depth(depth: &[f64], width: usize, height: usize, near: f64, far: f64, path: &Path) -> Result<()> {
    if depth.len() != width * height {
        return Err(Error::contract("depth buffer does not match its dimensions"));
    }
    if !(far > near) {
        return Err(Error::invalid("depth range needs far > near"));
    }
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(width as u32, height as u32, encode_depth(depth, near, far)).expect("sized buffer");
    img.save(path).map_err(|e| image_err(path, e))
}

/// Returns `(depth, width, height)`.
pub fn read_depth(path: &Path, near: f64, far: f64) -> Result<(Vec<f64>, usize, usize)> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((decode_depth(img.as_raw(), near, far), w, h))
}

/// Boolean mask as black and white.
pub fn write_mask(mask: &[bool], width: usize, height: usize, path: &Path) -> Result<()> {
    let bytes = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let img: Gray8 = ImageBuffer::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::contract("mask does not match its dimensions"))?;
    img.save(path).map_err(|e| image_err(path, e))
}

/// Images of equal height placed side by side.
pub fn hstack(images: &[RgbImage]) -> Result<RgbImage> {
    let Some(first) = images.first() else {
        return Err(Error::invalid("nothing to stack"));
    };
    let h = first.height;
    if images.iter().any(|i| i.height != h) {
        return Err(Error::contract("stacked images differ in height"));
    }
    let w: usize = images.iter().map(|i| i.width).sum();
    let mut out = RgbImage::new(w, h);
    let mut x0 = 0;
    for img in images {
        for y in 0..h {
            let src = &img.data[3 * y * img.width..3 * (y + 1) * img.width];
            out.data[3 * (y * w + x0)..3 * (y * w + x0 + img.width)].copy_from_slice(src);
        }
        x0 += img.width;
    }
    Ok(out)
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    }
}
