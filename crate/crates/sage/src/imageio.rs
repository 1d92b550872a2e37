//! PNG encoding of images (`[3, H, W]` in `[-1, 1]`, 8-bit RGB) and label
//! maps (8-bit single channel, values 0..=18).

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};
use sage_core::labels::NUM_CLASSES;
use sage_core::Tensor;

use crate::error::{read, write, Error, Result};

fn to_u8(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

fn from_u8(v: u8) -> f64 {
    v as f64 / 255.0 * 2.0 - 1.0
}

pub fn rgb_image(t: &Tensor) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Config(format!("expected a [3, H, W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        image::Rgb([to_u8(d[p]), to_u8(d[h * w + p]), to_u8(d[2 * h * w + p])])
    }))
}

pub fn encode_rgb(t: &Tensor) -> Result<Vec<u8>> {
    let img = rgb_image(t)?;
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).expect("in-memory png");
    Ok(out.into_inner())
}

pub fn encode_labels(labels: &[u8], h: usize, w: usize) -> Result<Vec<u8>> {
    if labels.len() != h * w {
        return Err(Error::Config(format!("{} labels for a {h}x{w} map", labels.len())));
    }
    let img = GrayImage::from_raw(w as u32, h as u32, labels.to_vec()).expect("size checked");
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).expect("in-memory png");
    Ok(out.into_inner())
}

pub fn decode_rgb(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let p = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + p] = from_u8(px[c]);
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], data))
}

/// Labels and `(h, w)`; every value must be a class index.
pub fn decode_labels(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| Error::format(path, e.to_string()))?;
    if img.color().channel_count() != 1 {
        return Err(Error::format(path, "label maps must be single-channel"));
    }
    let img = img.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let labels = img.into_raw();
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(Error::format(path, format!("label {bad} outside 0..={}", NUM_CLASSES - 1)));
    }
    Ok((labels, h, w))
}

pub fn save_rgb(path: &Path, t: &Tensor) -> Result<()> {
    write(path, &encode_rgb(t)?)
}

pub fn save_labels(path: &Path, labels: &[u8], h: usize, w: usize) -> Result<()> {
    write(path, &encode_labels(labels, h, w)?)
}

pub fn load_rgb(path: &Path) -> Result<Tensor> {
    decode_rgb(&read(path)?, path)
}

pub fn load_labels(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    decode_labels(&read(path)?, path)
}
