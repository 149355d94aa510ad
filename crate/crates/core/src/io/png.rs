//! 8-bit PNG output for final renders.
//!
//! Quantization happens only here: float values are clamped to `[0, 1]` and
//! rounded to `u8`. Everything upstream (losses, metrics) stays in floats.

use std::path::Path;

use crate::img::ImageBuf;

#[derive(Debug, thiserror::Error)]
pub enum PngError {
    #[error("png: {0}")]
    Encode(#[from] image::ImageError),
    #[error("png supports 1 or 3 channels, not {0}")]
    Channels(usize),
}

/// Quantizes one float value to a byte.
pub fn quantize(value: f64) -> u8 {
    (value.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 1- or 3-channel float image as an 8-bit PNG.
pub fn write_png(path: impl AsRef<Path>, image: &ImageBuf) -> Result<(), PngError> {
    let (w, h) = (image.width() as u32, image.height() as u32);
    match image.channels() {
        1 => {
            let buf = image::GrayImage::from_fn(w, h, |x, y| {
                image::Luma([quantize(image.get(x as usize, y as usize, 0))])
            });
            buf.save_with_format(path, image::ImageFormat::Png)?;
        }
        3 => {
            let buf = image::RgbImage::from_fn(w, h, |x, y| {
                image::Rgb([
                    quantize(image.get(x as usize, y as usize, 0)),
                    quantize(image.get(x as usize, y as usize, 1)),
                    quantize(image.get(x as usize, y as usize, 2)),
                ])
            });
            buf.save_with_format(path, image::ImageFormat::Png)?;
        }
        other => return Err(PngError::Channels(other)),
    }
    Ok(())
}

/// Reads an 8-bit PNG back into floats in `[0, 1]`.
pub fn read_png(path: impl AsRef<Path>) -> Result<ImageBuf, PngError> {
    let dynamic = image::open(path)?;
    match dynamic {
        image::DynamicImage::ImageLuma8(gray) => {
            let (w, h) = (gray.width() as usize, gray.height() as usize);
            Ok(ImageBuf::from_fn(w, h, 1, |x, y, _| {
                gray.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0
            }))
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            Ok(ImageBuf::from_fn(w, h, 3, |x, y, c| {
                rgb.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
            }))
        }
    }
}
