//! Image conditioning and derived channels.

pub mod clahe;
pub mod denoise;
pub mod features;
pub mod morph;
pub mod pipeline;
pub mod scaler;
pub mod stretch;

pub use clahe::{clahe, ClaheConfig};
pub use denoise::{nl_means_denoise, DenoiseConfig};
pub use features::{gaussian_blur, luminance, ndvi, sobel, texture};
pub use morph::{morph, morph_band, MorphOp};
pub use pipeline::{condition_band, condition_scene, smooth_mask, PreprocessConfig, CHANNEL_NAMES};
pub use scaler::{fit_scaler, ScalerParams};
pub use stretch::contrast_stretch;

use crate::error::{Error, Result};

/// Single-channel f32 image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Band {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(
                "band",
                format!("{width}x{height} needs {} samples, got {}", width * height, data.len()),
            ));
        }
        Ok(Band { width, height, data })
    }

    pub fn filled(width: usize, height: usize, v: f32) -> Self {
        Band {
            width,
            height,
            data: vec![v; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Band { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

/// Reflect-101 index (`dcb|abcd|cba`) for any offset from a valid range.
#[inline]
pub(crate) fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}
