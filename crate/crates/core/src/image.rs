//! 8-bit raster images, grayscale or RGB.
//!
//! Everything downstream of file IO works on [`ImageBuffer`]; the `image`
//! crate is only used for decoding, encoding and resampling.

use std::path::Path;

use image::imageops::FilterType;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image dimensions must be positive, got {width}x{height}")]
    EmptyDimensions { width: u32, height: u32 },
    #[error("unsupported channel count {0}; expected 1 or 3")]
    UnsupportedChannels(u8),
    #[error("pixel buffer holds {actual} bytes, expected {expected}")]
    BufferLength { expected: usize, actual: usize },
    #[error("failed to decode image: {0}")]
    Decode(String),
    #[error("failed to encode image: {0}")]
    Encode(String),
    #[error("cannot access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Row-major interleaved 8-bit pixels with one (gray) or three (RGB) channels.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    channels: u8,
    data: Vec<u8>,
}

impl std::fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImageBuffer")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, channels: u8, data: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::EmptyDimensions { width, height });
        }
        if channels != 1 && channels != 3 {
            return Err(ImageError::UnsupportedChannels(channels));
        }
        let expected = width as usize * height as usize * channels as usize;
        if data.len() != expected {
            return Err(ImageError::BufferLength {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn new_gray(width: u32, height: u32, data: Vec<u8>) -> Result<Self, ImageError> {
        Self::new(width, height, 1, data)
    }

    pub fn new_rgb(width: u32, height: u32, data: Vec<u8>) -> Result<Self, ImageError> {
        Self::new(width, height, 3, data)
    }

    /// Uniform grayscale image. Panics on zero dimensions.
    pub fn filled_gray(width: u32, height: u32, value: u8) -> Self {
        Self::new_gray(width, height, vec![value; width as usize * height as usize])
            .expect("filled_gray requires positive dimensions")
    }

    /// Uniform RGB image. Panics on zero dimensions.
    pub fn filled_rgb(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let n = width as usize * height as usize;
        let data = rgb.iter().copied().cycle().take(n * 3).collect();
        Self::new_rgb(width, height, data).expect("filled_rgb requires positive dimensions")
    }

    /// Grayscale image from a per-pixel function `f(x, y)`. Panics on zero dimensions.
    pub fn from_fn_gray(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> u8) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new_gray(width, height, data).expect("from_fn_gray requires positive dimensions")
    }

    /// RGB image from a per-pixel function `f(x, y)`. Panics on zero dimensions.
    pub fn from_fn_rgb(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::new_rgb(width, height, data).expect("from_fn_rgb requires positive dimensions")
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

    pub fn is_gray(&self) -> bool {
        self.channels == 1
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32, c: u8) -> u8 {
        let idx = (y as usize * self.width as usize + x as usize) * self.channels as usize
            + c as usize;
        self.data[idx]
    }

    /// Luma with integer BT.601 weights. Gray inputs are returned unchanged and
    /// equal-channel RGB maps back to the same level exactly.
    pub fn to_gray(&self) -> ImageBuffer {
        if self.is_gray() {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| {
                let l = 299 * p[0] as u32 + 587 * p[1] as u32 + 114 * p[2] as u32 + 500;
                (l / 1000) as u8
            })
            .collect();
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Replicates a gray image to three channels; RGB is returned unchanged.
    pub fn to_rgb(&self) -> ImageBuffer {
        if !self.is_gray() {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }

    /// Elementwise `255 - p`.
    pub fn inverted(&self) -> ImageBuffer {
        ImageBuffer {
            data: self.data.iter().map(|&v| 255 - v).collect(),
            ..self.clone()
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ImageError> {
        let img = image::load_from_memory(bytes).map_err(|e| ImageError::Decode(e.to_string()))?;
        Ok(Self::from_dynamic(img))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    fn from_dynamic(img: image::DynamicImage) -> Self {
        use image::DynamicImage;
        match img {
            DynamicImage::ImageLuma8(g) => {
                let (w, h) = g.dimensions();
                Self::new_gray(w, h, g.into_raw()).expect("decoder produced consistent buffer")
            }
            DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
                let g = img.to_luma8();
                let (w, h) = g.dimensions();
                Self::new_gray(w, h, g.into_raw()).expect("decoder produced consistent buffer")
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = rgb.dimensions();
                Self::new_rgb(w, h, rgb.into_raw()).expect("decoder produced consistent buffer")
            }
        }
    }

    fn to_dynamic(&self) -> image::DynamicImage {
        if self.is_gray() {
            image::DynamicImage::ImageLuma8(
                image::GrayImage::from_raw(self.width, self.height, self.data.clone())
                    .expect("buffer length validated at construction"),
            )
        } else {
            image::DynamicImage::ImageRgb8(
                image::RgbImage::from_raw(self.width, self.height, self.data.clone())
                    .expect("buffer length validated at construction"),
            )
        }
    }

    /// 8-bit PNG, grayscale or RGB to match the buffer.
    pub fn encode_png(&self) -> Result<Vec<u8>, ImageError> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_dynamic()
            .write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| ImageError::Encode(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        let path = path.as_ref();
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Center-crops to the largest square and resamples to `size`×`size`.
    pub fn center_square(&self, size: u32) -> ImageBuffer {
        let side = self.width.min(self.height);
        let x0 = (self.width - side) / 2;
        let y0 = (self.height - side) / 2;
        if side == size && self.width == self.height {
            return self.clone();
        }
        let cropped = self.to_dynamic().crop_imm(x0, y0, side, side);
        let resized = if side == size {
            cropped
        } else {
            cropped.resize_exact(size, size, FilterType::Triangle)
        };
        let out = Self::from_dynamic(resized);
        if self.is_gray() {
            out.to_gray()
        } else {
            out.to_rgb()
        }
    }

    /// Nearest-neighbour / area resize that keeps the channel layout.
    pub fn resized(&self, width: u32, height: u32) -> ImageBuffer {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let out = Self::from_dynamic(self.to_dynamic().resize_exact(width, height, FilterType::Triangle));
        if self.is_gray() {
            out.to_gray()
        } else {
            out.to_rgb()
        }
    }

    /// SHA-256 over dimensions, channel count and pixels.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.width.to_le_bytes());
        h.update(self.height.to_le_bytes());
        h.update([self.channels]);
        h.update(&self.data);
        h.finalize().into()
    }

    /// Fraction of samples equal to 255.
    pub fn white_fraction(&self) -> f64 {
        let white = self.data.iter().filter(|&&v| v == 255).count();
        white as f64 / self.data.len() as f64
    }
}
