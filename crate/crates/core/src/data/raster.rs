use std::path::Path;

use image::imageops::{self, FilterType};
use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::contract(format!("degenerate {height}×{width} image")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::shape(format!(
                "{height}×{width}×3 image needs {} bytes, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Result<Self> {
        Self::new(height, width, rgb.repeat(height * width))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Decodes any supported file into RGB.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let img = image::load_from_memory(&bytes)
            .map_err(|e| Error::Image { path: path.to_path_buf(), msg: e.to_string() })?
            .to_rgb8();
        Self::from_rgb(img)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb()
            .save_with_format(path, ImageFormat::Png)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::Image { path: path.to_path_buf(), msg: other.to_string() },
            })
    }

    fn from_rgb(img: RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        Self::new(h as usize, w as usize, img.into_raw())
    }

    fn to_rgb(&self) -> RgbImage {
        RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer length checked at construction")
    }

    /// Bilinear resize to `height×width`; same-size requests return a copy.
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::contract(format!("cannot resize to {height}×{width}")));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        Self::from_rgb(imageops::resize(&self.to_rgb(), width as u32, height as u32, FilterType::Triangle))
    }

    pub fn crop(&self, y: usize, x: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || y + height > self.height || x + width > self.width {
            return Err(Error::contract(format!(
                "crop {height}×{width} at ({y},{x}) outside {}×{} image",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * 3);
        for r in y..y + height {
            let s = (r * self.width + x) * 3;
            data.extend_from_slice(&self.data[s..s + width * 3]);
        }
        Self::new(height, width, data)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        let w = self.width;
        for y in 0..self.height {
            for x in 0..w {
                out.set_pixel(y, x, self.pixel(y, w - 1 - x));
            }
        }
        out
    }

    /// Mean of each channel in `[0, 255]`.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut s = [0.0f64; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                s[c] += px[c] as f64;
            }
        }
        let n = (self.height * self.width) as f64;
        s.map(|v| v / n)
    }

    /// Mean over all pixels and channels, in `[0, 255]`.
    pub fn mean_value(&self) -> f64 {
        self.channel_means().iter().sum::<f64>() / 3.0
    }

    /// Planar `3×H×W` floats, `((v/255) - mean[c]) / std[c]`.
    pub fn to_chw(&self, norm: &Normalize) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0f32; 3 * hw];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = (px[c] as f32 / 255.0 - norm.mean[c]) / norm.std[c];
            }
        }
        out
    }
}

/// Per-channel normalization applied after scaling pixels to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalize {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalize {
    fn default() -> Self {
        Normalize { mean: [0.5; 3], std: [0.5; 3] }
    }
}

impl Normalize {
    /// Maps a normalized value of channel `c` back to `[0, 1]`.
    pub fn invert(&self, c: usize, v: f32) -> f32 {
        v * self.std[c] + self.mean[c]
    }
}
