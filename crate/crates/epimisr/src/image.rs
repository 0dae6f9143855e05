//! 8-bit PNG images as `[H, W, 3]` float tensors in `[0, 1]`.

use std::path::Path;

use epimisr_core::{Scalar, Tensor};

use crate::error::{Error, Result};
use crate::fsutil::{read, write_atomic};

fn image_err(path: &Path, msg: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

/// Rounds `[0, 1]` values to 8 bits; values outside are clamped.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_png(path: &Path, w: usize, h: usize, color: png::ColorType, bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| image_err(path, e))?;
        writer.write_image_data(bytes).map_err(|e| image_err(path, e))?;
    }
    Ok(out)
}

pub fn encode_rgb<T: Scalar>(img: &Tensor<T>, path: &Path) -> Result<Vec<u8>> {
    let (h, w) = match *img.shape() {
        [h, w, 3] => (h, w),
        ref s => return Err(image_err(path, format!("expected an [H,W,3] image, got {s:?}"))),
    };
    let bytes: Vec<u8> = img.data().iter().map(|v| quantize(v.f64())).collect();
    encode_png(path, w, h, png::ColorType::Rgb, &bytes)
}

pub fn write_rgb<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    write_atomic(path, &encode_rgb(img, path)?)
}

/// Single-channel `[H, W]` image.
pub fn write_gray<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    let (h, w) = match *img.shape() {
        [h, w] => (h, w),
        ref s => return Err(image_err(path, format!("expected an [H,W] image, got {s:?}"))),
    };
    let bytes: Vec<u8> = img.data().iter().map(|v| quantize(v.f64())).collect();
    write_atomic(path, &encode_png(path, w, h, png::ColorType::Grayscale, &bytes)?)
}

/// Reads an RGB or RGBA 8-bit PNG; alpha is dropped.
pub fn read_rgb<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = read(path)?;
    let dec = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = dec.read_info().map_err(|e| image_err(path, e))?;
    let mut buf = vec![
        0;
        reader
            .output_buffer_size()
            .ok_or_else(|| image_err(path, "image too large"))?
    ];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(image_err(path, "only 8-bit PNG is supported"));
    }
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        other => return Err(image_err(path, format!("unsupported color type {other:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(w * h * 3);
    for px in buf[..info.buffer_size()].chunks_exact(channels) {
        for c in 0..3 {
            let v = px[if channels == 1 { 0 } else { c }];
            data.push(T::of(v as f64 / 255.0));
        }
    }
    Tensor::new(&[h, w, 3], data).map_err(Error::from)
}

/// Side-by-side strip of equally sized `[H, W, 3]` images.
pub fn hstack<T: Scalar>(images: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::Usage("nothing to stack".into()))?;
    let (h, w) = (first.shape()[0], first.shape()[1]);
    if images.iter().any(|i| i.shape() != first.shape()) {
        return Err(Error::Usage("strip images differ in size".into()));
    }
    let n = images.len();
    let mut out = Tensor::zeros(&[h, w * n, 3]);
    for (k, img) in images.iter().enumerate() {
        for y in 0..h {
            let src = &img.data()[y * w * 3..(y + 1) * w * 3];
            let o = (y * w * n + k * w) * 3;
            out.data_mut()[o..o + w * 3].copy_from_slice(src);
        }
    }
    Ok(out)
}
