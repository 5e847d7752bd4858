//! Scene conditioning and assembly of the six-channel stack.

use super::clahe::{clahe, ClaheConfig};
use super::denoise::{nl_means_denoise, DenoiseConfig};
use super::features::{luminance, ndvi, texture};
use super::morph::{morph, MorphOp};
use super::stretch::contrast_stretch;
use super::Band;
use crate::error::{Error, Result};
use crate::raster::{Mask, Raster, RAW_MAX};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Channel order of every conditioned scene and tile.
pub const CHANNEL_NAMES: [&str; 6] = ["red", "green", "blue", "nir", "ndvi", "texture"];
pub const SPECTRAL_BANDS: usize = 4;
const RED: usize = 0;
const GREEN: usize = 1;
const BLUE: usize = 2;
const NIR: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// `None` skips the step.
    pub denoise: Option<DenoiseConfig>,
    pub clahe: Option<ClaheConfig>,
    /// Percentiles of the contrast stretch; `None` skips it.
    pub stretch: Option<(f64, f64)>,
    pub texture_sigma: f32,
    /// Opening radius applied to label masks; 0 leaves them untouched.
    pub mask_open_radius: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            denoise: Some(DenoiseConfig::default()),
            clahe: Some(ClaheConfig::default()),
            stretch: Some((2.0, 98.0)),
            texture_sigma: 2.0,
            mask_open_radius: 1,
        }
    }
}

/// Applies denoise, CLAHE and stretch to one raw band rescaled to 0–255.
pub fn condition_band(raw: Vec<f32>, width: usize, height: usize, cfg: &PreprocessConfig) -> Result<Band> {
    let scale = 255.0 / RAW_MAX as f32;
    let mut b = Band::new(width, height, raw.into_iter().map(|v| v * scale).collect())?;
    if let Some(d) = &cfg.denoise {
        b = nl_means_denoise(&b, d)?;
    }
    if let Some(c) = &cfg.clahe {
        b = clahe(&b, c);
    }
    if let Some((lo, hi)) = cfg.stretch {
        b = contrast_stretch(&b, lo, hi);
    }
    Ok(b)
}

/// Conditions the four spectral bands and appends NDVI and texture, both
/// computed from the conditioned bands. Returns an f32 raster with the
/// channels of [`CHANNEL_NAMES`] and the input transform.
pub fn condition_scene(raster: &Raster, cfg: &PreprocessConfig) -> Result<Raster> {
    if raster.bands < SPECTRAL_BANDS {
        return Err(Error::invalid(
            "condition_scene",
            format!("needs bands red, green, blue, nir; raster has {} band(s)", raster.bands),
        ));
    }
    let (w, h) = (raster.width, raster.height);
    let bands: Vec<Band> = (0..SPECTRAL_BANDS)
        .into_par_iter()
        .map(|i| condition_band(raster.band_f32(i), w, h, cfg))
        .collect::<Result<_>>()?;
    let v = ndvi(&bands[NIR], &bands[RED])?;
    let luma = luminance(&bands[RED], &bands[GREEN], &bands[BLUE])?;
    let t = texture(&luma, cfg.texture_sigma);
    let mut data = Vec::with_capacity(w * h * CHANNEL_NAMES.len());
    for b in bands.iter().chain([&v, &t]) {
        data.extend_from_slice(&b.data);
    }
    if let Some(i) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            what: "conditioned scene".into(),
            detail: format!("sample {i}"),
        });
    }
    Raster::new_f32(w, h, CHANNEL_NAMES.len(), data, raster.transform)
}

/// Label mask cleanup by morphological opening.
pub fn smooth_mask(mask: &Mask, cfg: &PreprocessConfig) -> Mask {
    if cfg.mask_open_radius == 0 {
        return mask.clone();
    }
    morph(mask, MorphOp::Open, cfg.mask_open_radius)
}
