use std::path::Path;

use image::imageops::FilterType;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-channel affine pixel normalization: `(v / 255 - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelNormalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for PixelNormalization {
    /// ImageNet channel statistics.
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl PixelNormalization {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("pixel normalization needs finite means and positive stds".into()));
        }
        Ok(())
    }
}

/// A normalized `height x width x 3` image in row-major HWC order.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl ImageTensor {
    pub fn side(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.values[(y * self.width + x) * self.channels + c]
    }
}

/// Reads, resizes to `side x side` and normalizes an image file.
pub fn preprocess_image(path: &Path, side: usize, norm: &PixelNormalization) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("unreadable image {}: {e}", path.display())))?
        .to_rgb8();
    preprocess_rgb(&img, side, norm)
}

pub fn preprocess_rgb(img: &RgbImage, side: usize, norm: &PixelNormalization) -> Result<ImageTensor> {
    if side == 0 {
        return Err(Error::Config("image side must be positive".into()));
    }
    norm.validate()?;
    let side32 = u32::try_from(side).map_err(|_| Error::Config(format!("image side {side} too large")))?;
    let resized;
    let src = if img.dimensions() == (side32, side32) {
        img
    } else {
        resized = image::imageops::resize(img, side32, side32, FilterType::Triangle);
        &resized
    };
    let mut values = Vec::with_capacity(side * side * 3);
    for p in src.pixels() {
        for c in 0..3 {
            values.push((p.0[c] as f64 / 255.0 - norm.mean[c]) / norm.std[c]);
        }
    }
    Ok(ImageTensor {
        height: side,
        width: side,
        channels: 3,
        values,
    })
}
