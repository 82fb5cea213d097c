//! Dense float images with interleaved channels.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RasterError {
    #[error("image size mismatch: {left:?} vs {right:?}")]
    SizeMismatch { left: (usize, usize, usize), right: (usize, usize, usize) },
    #[error("expected {expected} channels, got {actual}")]
    Channels { expected: usize, actual: usize },
}

/// Row-major image, `channels` floats per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

/// Rec. 709 luma weights.
pub const LUMA: [f32; 3] = [0.2126, 0.7152, 0.0722];

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn filled(width: usize, height: usize, value: &[f32]) -> Self {
        let mut data = Vec::with_capacity(width * height * value.len());
        for _ in 0..width * height {
            data.extend_from_slice(value);
        }
        Self { width, height, channels: value.len(), data }
    }

    pub fn from_rgb(width: usize, height: usize, rgb: &[[f32; 3]]) -> Self {
        assert_eq!(rgb.len(), width * height);
        Self { width, height, channels: 3, data: rgb.iter().flatten().copied().collect() }
    }

    pub fn from_gray(width: usize, height: usize, gray: Vec<f32>) -> Self {
        assert_eq!(gray.len(), width * height);
        Self { width, height, channels: 1, data: gray }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    pub fn ensure_same_shape(&self, other: &Image) -> Result<(), RasterError> {
        if self.shape() != other.shape() {
            return Err(RasterError::SizeMismatch { left: self.shape(), right: other.shape() });
        }
        Ok(())
    }

    /// Rec. 709 luma for RGB input; single-channel images are returned as-is.
    pub fn to_gray(&self) -> Image {
        match self.channels {
            1 => self.clone(),
            3 => Image::from_gray(
                self.width,
                self.height,
                self.data.chunks_exact(3).map(|p| luma(p[0], p[1], p[2])).collect(),
            ),
            c => panic!("to_gray: unsupported channel count {c}"),
        }
    }

    /// Crops `[x0, x0+w) x [y0, y0+h)`, which must lie inside the image.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Image {
        let mut out = Image::new(w, h, self.channels);
        for y in 0..h {
            let src = ((y0 + y) * self.width + x0) * self.channels;
            let dst = y * w * self.channels;
            out.data[dst..dst + w * self.channels].copy_from_slice(&self.data[src..src + w * self.channels]);
        }
        out
    }

    /// Rounds every value to the nearest 8-bit level, as a PNG would store it.
    pub fn quantized(&self) -> Image {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = quantize_u8(*v) as f32 / 255.0;
        }
        out
    }
}

pub fn luma(r: f32, g: f32, b: f32) -> f32 {
    LUMA[0] * r + LUMA[1] * g + LUMA[2] * b
}

/// `round(clamp(v) * 255)` with halves rounded up.
pub fn quantize_u8(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v as f64 * 255.0 + 0.5).floor() as u8
}
