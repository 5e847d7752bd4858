//! Rasters, label polygons, tiling, augmentation and the synthetic scene
//! generator.

pub mod augment;
pub mod io;
pub mod labels;
pub mod store;
pub mod synth;
pub mod tiling;

pub use augment::{augment, patch_paste, AugmentConfig, Patch, PasteOutcome};
pub use io::{read_raster, write_mask_pgm, write_pgm, write_ppm, write_raster};
pub use labels::{rasterize, read_labels, write_labels, LabelPolygon, LabelSet};
pub use store::{read_tiles, write_tiles};
pub use synth::{generate_scene, Scene, SceneConfig};
pub use tiling::{filter_tiles, tile, tile_origins, DropReason, FilterConfig, TileOrigin, TileRecord, TilingConfig};

use crate::error::{Error, Result};

/// Raw sample range of the imagery.
pub const RAW_MAX: u16 = 4095;

/// Pixel → world affine transform, GDAL coefficient order:
/// `x = c[0] + px·c[1] + py·c[2]`, `y = c[3] + px·c[4] + py·c[5]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Affine(pub [f64; 6]);

impl Default for Affine {
    fn default() -> Self {
        Affine::IDENTITY
    }
}

impl Affine {
    pub const IDENTITY: Affine = Affine([0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);

    pub fn apply(&self, px: f64, py: f64) -> (f64, f64) {
        let c = &self.0;
        (c[0] + px * c[1] + py * c[2], c[3] + px * c[4] + py * c[5])
    }

    pub fn determinant(&self) -> f64 {
        self.0[1] * self.0[5] - self.0[2] * self.0[4]
    }

    pub fn is_invertible(&self) -> bool {
        let d = self.determinant();
        d.is_finite() && d != 0.0
    }

    pub fn inverse(&self) -> Result<Affine> {
        if !self.is_invertible() {
            return Err(Error::invalid("affine transform", "transform is singular"));
        }
        let c = &self.0;
        let d = self.determinant();
        let (a, b, e, f) = (c[5] / d, -c[2] / d, -c[4] / d, c[1] / d);
        Ok(Affine([
            -(a * c[0] + b * c[3]),
            a,
            b,
            -(e * c[0] + f * c[3]),
            e,
            f,
        ]))
    }
}

/// Band storage.
#[derive(Debug, Clone, PartialEq)]
pub enum Samples {
    U16(Vec<u16>),
    F32(Vec<f32>),
}

impl Samples {
    pub fn len(&self) -> usize {
        match self {
            Samples::U16(v) => v.len(),
            Samples::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Georeferenced multi-band image, band planes stored one after another.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub samples: Samples,
    pub transform: Affine,
}

impl Raster {
    pub fn new_u16(width: usize, height: usize, bands: usize, data: Vec<u16>, transform: Affine) -> Result<Self> {
        Self::check(width, height, bands, data.len())?;
        Ok(Raster {
            width,
            height,
            bands,
            samples: Samples::U16(data),
            transform,
        })
    }

    pub fn new_f32(width: usize, height: usize, bands: usize, data: Vec<f32>, transform: Affine) -> Result<Self> {
        Self::check(width, height, bands, data.len())?;
        Ok(Raster {
            width,
            height,
            bands,
            samples: Samples::F32(data),
            transform,
        })
    }

    fn check(width: usize, height: usize, bands: usize, len: usize) -> Result<()> {
        if width * height * bands != len {
            return Err(Error::invalid(
                "raster",
                format!("{width}x{height}x{bands} needs {} samples, got {len}", width * height * bands),
            ));
        }
        Ok(())
    }

    pub fn plane_len(&self) -> usize {
        self.width * self.height
    }

    /// One band as f32 values (u16 samples converted exactly).
    pub fn band_f32(&self, band: usize) -> Vec<f32> {
        let r = band * self.plane_len()..(band + 1) * self.plane_len();
        match &self.samples {
            Samples::U16(v) => v[r].iter().map(|&s| s as f32).collect(),
            Samples::F32(v) => v[r].to_vec(),
        }
    }

    pub fn band_u16(&self, band: usize) -> Option<&[u16]> {
        match &self.samples {
            Samples::U16(v) => Some(&v[band * self.plane_len()..(band + 1) * self.plane_len()]),
            Samples::F32(_) => None,
        }
    }
}

/// Binary raster mask, row-major, values 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Mask::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(x, y) as u8;
            }
        }
        m
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn positive_rate(&self) -> f32 {
        if self.data.is_empty() {
            0.0
        } else {
            (self.count() as f64 / self.data.len() as f64) as f32
        }
    }

    /// Sub-window copy.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Mask {
        Mask::from_fn(w, h, |x, y| self.get(x0 + x, y0 + y))
    }
}
