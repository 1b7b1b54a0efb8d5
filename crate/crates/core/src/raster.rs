//! 8-bit pixel buffers and the raster operations the pipeline needs:
//! decode/encode, crop, resize, grayscale, blur, noise, MSE.

use crate::error::{Error, Result};
use image::{imageops, DynamicImage, GrayImage, RgbImage};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Interleaved 8-bit raster with 1 (gray) or 3 (RGB) channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    width: u32,
    height: u32,
    channels: u8,
    data: Vec<u8>,
}

impl Raster {
    pub fn new(width: u32, height: u32, channels: u8, fill: u8) -> Self {
        assert!(channels == 1 || channels == 3, "1 or 3 channels");
        Self {
            width,
            height,
            channels,
            data: vec![fill; (width * height * channels as u32) as usize],
        }
    }

    pub fn from_parts(width: u32, height: u32, channels: u8, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), (width * height * channels as u32) as usize);
        assert!(channels == 1 || channels == 3);
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32, c: u8) -> u8 {
        self.data[((y * self.width + x) * self.channels as u32 + c as u32) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, c: u8, v: u8) {
        self.data[((y * self.width + x) * self.channels as u32 + c as u32) as usize] = v;
    }

    /// Luma for gray rasters is the pixel itself; for RGB it is BT.601.
    #[inline]
    pub fn luma(&self, x: u32, y: u32) -> f64 {
        if self.channels == 1 {
            self.get(x, y, 0) as f64
        } else {
            0.299 * self.get(x, y, 0) as f64
                + 0.587 * self.get(x, y, 1) as f64
                + 0.114 * self.get(x, y, 2) as f64
        }
    }

    pub fn fill_rect(&mut self, x0: u32, y0: u32, x1: u32, y1: u32, value: &[u8]) {
        assert_eq!(value.len(), self.channels as usize);
        for y in y0..y1.min(self.height) {
            for x in x0..x1.min(self.width) {
                for (c, v) in value.iter().enumerate() {
                    self.set(x, y, c as u8, *v);
                }
            }
        }
    }

    pub fn to_gray(&self) -> Raster {
        if self.channels == 1 {
            return self.clone();
        }
        let mut out = Raster::new(self.width, self.height, 1, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(x, y, 0, self.luma(x, y).round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }

    /// Integer-rect crop; the rect must lie within bounds.
    pub fn crop(&self, x0: u32, y0: u32, x1: u32, y1: u32) -> Raster {
        assert!(x0 < x1 && y0 < y1 && x1 <= self.width && y1 <= self.height);
        let (w, h) = (x1 - x0, y1 - y0);
        let mut out = Raster::new(w, h, self.channels, 0);
        for y in 0..h {
            for x in 0..w {
                for c in 0..self.channels {
                    out.set(x, y, c, self.get(x0 + x, y0 + y, c));
                }
            }
        }
        out
    }

    /// Bilinear (triangle-filter) resize. The kernel is part of model
    /// identity: every crop a model sees goes through this path.
    pub fn resize(&self, width: u32, height: u32) -> Raster {
        if width == self.width && height == self.height {
            return self.clone();
        }
        match self.to_dynamic() {
            DynamicImage::ImageLuma8(img) => Raster::from_gray_image(&imageops::resize(
                &img,
                width,
                height,
                imageops::FilterType::Triangle,
            )),
            other => {
                let resized =
                    imageops::resize(&other.to_rgb8(), width, height, imageops::FilterType::Triangle);
                Raster::from_rgb_image(&resized)
            }
        }
    }

    pub fn gaussian_blur(&self, sigma: f32) -> Raster {
        match self.to_dynamic() {
            DynamicImage::ImageLuma8(img) => {
                Raster::from_gray_image(&imageops::blur(&img, sigma))
            }
            other => Raster::from_rgb_image(&imageops::blur(&other.to_rgb8(), sigma)),
        }
    }

    /// Adds seeded Gaussian noise (Box-Muller) with the given sigma, clamped
    /// to 8-bit range.
    pub fn with_noise(&self, sigma: f64, seed: u64) -> Raster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        for v in &mut out.data {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let n = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            *v = (*v as f64 + sigma * n).round().clamp(0.0, 255.0) as u8;
        }
        out
    }

    /// Mean squared error over all channels; dimensions and channel counts
    /// must match.
    pub fn mse(&self, other: &Raster) -> Result<f64> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch {
                a_width: self.width,
                a_height: self.height,
                b_width: other.width,
                b_height: other.height,
            });
        }
        if self.channels != other.channels {
            return Err(Error::ChannelMismatch {
                a: self.channels,
                b: other.channels,
            });
        }
        let sum: u64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = *a as i64 - *b as i64;
                (d * d) as u64
            })
            .sum();
        Ok(sum as f64 / self.data.len() as f64)
    }

    fn to_dynamic(&self) -> DynamicImage {
        if self.channels == 1 {
            DynamicImage::ImageLuma8(
                GrayImage::from_raw(self.width, self.height, self.data.clone())
                    .expect("buffer sized to dimensions"),
            )
        } else {
            DynamicImage::ImageRgb8(
                RgbImage::from_raw(self.width, self.height, self.data.clone())
                    .expect("buffer sized to dimensions"),
            )
        }
    }

    fn from_gray_image(img: &GrayImage) -> Raster {
        Raster::from_parts(img.width(), img.height(), 1, img.as_raw().clone())
    }

    fn from_rgb_image(img: &RgbImage) -> Raster {
        Raster::from_parts(img.width(), img.height(), 3, img.as_raw().clone())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Raster> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::ImageIo {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(match img {
            DynamicImage::ImageLuma8(g) => Raster::from_gray_image(&g),
            other => Raster::from_rgb_image(&other.to_rgb8()),
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<Raster> {
        let img = image::load_from_memory(bytes).map_err(|source| Error::ImageIo {
            path: "<memory>".into(),
            source,
        })?;
        Ok(match img {
            DynamicImage::ImageLuma8(g) => Raster::from_gray_image(&g),
            other => Raster::from_rgb_image(&other.to_rgb8()),
        })
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.to_dynamic()
            .write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
            .map_err(|source| Error::ImageIo {
                path: "<memory>".into(),
                source,
            })?;
        Ok(out)
    }

    /// JPEG-encodes at `quality` in 1..=100.
    pub fn encode_jpeg(&self, quality: u8) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let mut cursor = std::io::Cursor::new(&mut out);
        let mut enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut cursor, quality);
        enc.encode_image(&self.to_dynamic())
            .map_err(|source| Error::ImageIo {
                path: "<memory>".into(),
                source,
            })?;
        Ok(out)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.encode_png()?;
        crate::dataset::atomic_write(path.as_ref(), &bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_counts_all_channels() {
        let a = Raster::new(4, 4, 3, 10);
        let mut b = a.clone();
        b.set(0, 0, 0, 20); // one channel off by 10 out of 48 samples
        assert_eq!(a.mse(&b).unwrap(), 100.0 / 48.0);
    }

    #[test]
    fn crop_is_exact() {
        let mut r = Raster::new(8, 8, 1, 0);
        r.set(3, 2, 0, 77);
        let c = r.crop(3, 2, 5, 4);
        assert_eq!(c.width(), 2);
        assert_eq!(c.height(), 2);
        assert_eq!(c.get(0, 0, 0), 77);
    }

    #[test]
    fn png_roundtrip_lossless() {
        let mut r = Raster::new(9, 5, 3, 0);
        for (i, v) in r.data.iter_mut().enumerate() {
            *v = (i * 37 % 256) as u8;
        }
        let back = Raster::decode(&r.encode_png().unwrap()).unwrap();
        assert_eq!(r, back);
    }

    #[test]
    fn jpeg_quality_orders_error() {
        let mut r = Raster::new(32, 32, 3, 0);
        for y in 0..32 {
            for x in 0..32 {
                let v = ((x * 8 + y * 3) % 256) as u8;
                r.set(x, y, 0, v);
                r.set(x, y, 1, v.wrapping_add(40));
                r.set(x, y, 2, 255 - v);
            }
        }
        let low = Raster::decode(&r.encode_jpeg(10).unwrap()).unwrap();
        let high = Raster::decode(&r.encode_jpeg(90).unwrap()).unwrap();
        assert!(r.mse(&low).unwrap() > r.mse(&high).unwrap());
    }

    #[test]
    fn noise_is_seeded() {
        let r = Raster::new(16, 16, 1, 128);
        assert_eq!(r.with_noise(5.0, 7), r.with_noise(5.0, 7));
        assert_ne!(r.with_noise(5.0, 7), r.with_noise(5.0, 8));
    }
}
