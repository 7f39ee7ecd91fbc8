//! Planar RGB images in `[-1, 1]` and their 8-bit PNG encoding.

use std::io::Cursor;
use std::path::Path;

use crate::error::{invalid_arg, Error, Result};

/// Three-channel image stored channel-major (`3 x H x W`), values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(invalid_arg!(
                "image buffer has {} values, expected {}",
                data.len(),
                3 * height * width
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; 3 * height * width],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, row: usize, col: usize) -> f32 {
        self.data[(c * self.height + row) * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, c: usize, row: usize, col: usize, v: f32) {
        self.data[(c * self.height + row) * self.width + col] = v;
    }

    /// Rec.601 luminance of the `[0, 1]`-mapped image, one value per pixel.
    pub fn luminance01(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        (0..hw)
            .map(|p| {
                let r = (self.data[p] as f64 + 1.0) * 0.5;
                let g = (self.data[hw + p] as f64 + 1.0) * 0.5;
                let b = (self.data[2 * hw + p] as f64 + 1.0) * 0.5;
                luminance([r, g, b])
            })
            .collect()
    }

    /// Rounds to the nearest 8-bit level, as a PNG round trip would.
    pub fn quantized(&self) -> Self {
        let data = self
            .data
            .iter()
            .map(|&v| byte_to_unit(unit_to_byte(v)))
            .collect();
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let hw = self.height * self.width;
        let mut out = Vec::with_capacity(3 * hw);
        for p in 0..hw {
            for c in 0..3 {
                out.push(unit_to_byte(self.data[c * hw + p]));
            }
        }
        out
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        let hw = height * width;
        if bytes.len() != 3 * hw {
            return Err(invalid_arg!("rgb buffer has {} bytes, expected {}", bytes.len(), 3 * hw));
        }
        let mut data = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                data[c * hw + p] = byte_to_unit(bytes[3 * p + c]);
            }
        }
        Ok(Self { height, width, data })
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .ok_or_else(|| invalid_arg!("image dimensions do not match buffer"))?;
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
        Self::from_rgb8(img.height() as usize, img.width() as usize, img.as_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_png(&bytes)
    }
}

pub fn luminance(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

#[inline]
pub fn unit_to_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

#[inline]
pub fn byte_to_unit(b: u8) -> f32 {
    b as f32 / 255.0 * 2.0 - 1.0
}

/// PSNR in dB between two `[-1, 1]` images, measured on the `[0, 1]` scale.
pub fn psnr(a: &Image, b: &Image) -> f64 {
    psnr_masked(a, b, None)
}

/// PSNR restricted to pixels where `mask` is true (all pixels if `None`).
pub fn psnr_masked(a: &Image, b: &Image, mask: Option<&[bool]>) -> f64 {
    assert_eq!(a.data.len(), b.data.len());
    let hw = a.height * a.width;
    let mut sum = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for p in 0..hw {
            if mask.is_none_or(|m| m[p]) {
                let d = (a.data[c * hw + p] as f64 - b.data[c * hw + p] as f64) * 0.5;
                sum += d * d;
                count += 1;
            }
        }
    }
    let mse = sum / count.max(1) as f64;
    if mse <= 0.0 {
        return f64::INFINITY;
    }
    10.0 * (1.0 / mse).log10()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_equals_quantization() {
        let data: Vec<f32> = (0..3 * 4 * 5).map(|i| (i as f32 / 30.0) - 1.0).collect();
        let img = Image::new(4, 5, data).unwrap();
        let back = Image::decode_png(&img.encode_png().unwrap()).unwrap();
        assert_eq!(back, img.quantized());
    }

    #[test]
    fn psnr_of_identical_images_is_infinite() {
        let img = Image::filled(2, 2, 0.3);
        assert!(psnr(&img, &img).is_infinite());
        let other = Image::filled(2, 2, 0.5);
        // difference 0.1 on the [0, 1] scale -> 20 dB
        assert!((psnr(&img, &other) - 20.0).abs() < 1e-4);
    }
}
