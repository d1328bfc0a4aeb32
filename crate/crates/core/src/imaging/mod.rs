//! Pixel-domain data model: images, the procedural toy corpus, text
//! watermark rendering on a segment grid, and classical transforms.

mod corpus;
pub mod font;
mod io;
mod transform;
mod watermark;

pub use corpus::{generate_corpus, CorpusEntry};
pub use io::{load_png, save_png, write_corpus};
pub use transform::{apply_transform, TransformSpec};
pub use watermark::{
    crop_segments, overlay_patch, paste_segments, render_watermark, GlyphGeometry, Rect, SegmentLayout, WatermarkSpec,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Smallest accepted image side.
pub const MIN_SIDE: usize = 16;

/// Channel-major raster with every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    /// Validates shape and range; values must already lie in `[0, 1]`.
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::check_shape(channels, height, width)?;
        if data.len() != channels * height * width {
            return Err(Error::shape(channels * height * width, data.len()));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::param("pixels", format!("value {v} outside [0, 1]")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Builds an image from arbitrary values, clamping into `[0, 1]`.
    pub fn from_clamped(channels: usize, height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(channels, height, width, data)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::from_clamped(channels, height, width, vec![value; channels * height * width])
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Self::from_clamped(t.channels, t.height, t.width, t.data.clone())
    }

    /// Unchecked construction for sub-images whose side may be below [`MIN_SIDE`].
    pub(crate) fn raw(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    fn check_shape(channels: usize, height: usize, width: usize) -> Result<()> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidDimensions(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidDimensions(format!("{height}x{width}")));
        }
        Ok(())
    }

    /// Whole-image validation including the minimum side length.
    pub fn validate_full(&self) -> Result<()> {
        if self.height < MIN_SIDE || self.width < MIN_SIDE {
            return Err(Error::InvalidDimensions(format!(
                "{}x{} is below the {MIN_SIDE}-pixel minimum",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub(crate) fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v.clamp(0.0, 1.0);
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.channels, self.height, self.width, self.data.clone())
    }

    /// Mean over channels, as a single-channel image.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let p = self.height * self.width;
        let data = (0..p)
            .map(|i| (0..self.channels).map(|c| self.data[c * p + i]).sum::<f64>() / self.channels as f64)
            .collect();
        Image::raw(1, self.height, self.width, data)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64).sqrt()
    }

    pub fn channel_mean(&self, c: usize) -> f64 {
        let p = self.height * self.width;
        self.data[c * p..(c + 1) * p].iter().sum::<f64>() / p as f64
    }

    pub fn same_shape(&self, other: &Image) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(self.shape(), other.shape()));
        }
        Ok(())
    }

    /// Root-mean-square pixel difference.
    pub fn rmse(&self, other: &Image) -> Result<f64> {
        self.same_shape(other)?;
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok((s / self.data.len() as f64).sqrt())
    }

    pub fn linf_distance(&self, other: &Image) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn l1_distance(&self, other: &Image) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum())
    }

    pub fn l2_distance(&self, other: &Image) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    /// Sub-image copy; the rectangle must lie inside the image.
    pub fn region(&self, rect: Rect) -> Result<Image> {
        rect.check_inside(self.height, self.width)?;
        let mut data = Vec::with_capacity(self.channels * rect.height * rect.width);
        for c in 0..self.channels {
            for y in rect.top..rect.top + rect.height {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + rect.left..row + rect.left + rect.width]);
            }
        }
        Ok(Image::raw(self.channels, rect.height, rect.width, data))
    }

    /// Rounds every sample to the 8-bit grid, as a PNG round trip would.
    pub fn quantized(&self) -> Image {
        let data = self.data.iter().map(|&v| to_u8(v) as f64 / 255.0).collect();
        Image { data, ..*self }
    }

    /// SHA-256 of the 8-bit quantized pixels and shape, as lowercase hex.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.channels as u64).to_le_bytes());
        h.update((self.height as u64).to_le_bytes());
        h.update((self.width as u64).to_le_bytes());
        let bytes: Vec<u8> = self.data.iter().map(|v| to_u8(*v)).collect();
        h.update(&bytes);
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Value-exact hash of the underlying `f64` pixels.
    pub fn exact_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub(crate) fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
