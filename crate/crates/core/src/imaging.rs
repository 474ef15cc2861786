//! Grayscale images with intensities in `[0, 1]`. Quantization to 8 bits
//! happens only when reading or writing files.

use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("pixel buffer has {got} entries, expected {expected}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("pixel {index} = {value} is outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("{path}: {message}")]
    Codec { path: PathBuf, message: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: u32,
    height: u32,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, pixels: Vec<f64>) -> Result<Self, ImageError> {
        let expected = width as usize * height as usize;
        if pixels.len() != expected {
            return Err(ImageError::SizeMismatch { expected, got: pixels.len() });
        }
        if let Some((index, &value)) = pixels.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(ImageError::OutOfRange { index, value });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: u32, height: u32, value: f64) -> Self {
        Self { width, height, pixels: vec![value.clamp(0.0, 1.0); width as usize * height as usize] }
    }

    /// Builds an image from `f(x, y)`, clamping to `[0, 1]`.
    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self { width, height, pixels }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    /// Applies `f` per pixel, clamping the result.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect(),
        }
    }

    /// Half-resolution image by 2×2 box averaging.
    pub fn half(&self) -> Self {
        let (w, h) = ((self.width / 2).max(1), (self.height / 2).max(1));
        Self::from_fn(w, h, |x, y| {
            let (x0, y0) = ((2 * x).min(self.width - 1), (2 * y).min(self.height - 1));
            let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
            0.25 * (self.get(x0, y0) + self.get(x1, y0) + self.get(x0, y1) + self.get(x1, y1))
        })
    }

    /// Decodes PGM or PNG; colour inputs are reduced to luminance.
    pub fn load(path: &Path) -> Result<Self, ImageError> {
        let img = image::open(path).map_err(|e| ImageError::Codec { path: path.to_path_buf(), message: e.to_string() })?;
        let luma = img.to_luma8();
        let (w, h) = luma.dimensions();
        Ok(Self { width: w, height: h, pixels: luma.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect() })
    }

    /// Encodes as 8-bit grayscale; format follows the extension (`.png`, `.pgm`).
    pub fn save(&self, path: &Path) -> Result<(), ImageError> {
        let buf: Vec<u8> = self.pixels.iter().map(|&v| (v * 255.0).round() as u8).collect();
        let img = image::GrayImage::from_raw(self.width, self.height, buf).expect("buffer matches dimensions");
        img.save(path).map_err(|e| ImageError::Codec { path: path.to_path_buf(), message: e.to_string() })
    }
}
