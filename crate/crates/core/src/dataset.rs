//! Scene-to-tile dataset preparation shared by the command line and the
//! end-to-end tests: conditioning, rasterized labels, tiling, filtering and
//! patch-paste synthesis.

use crate::error::{Error, Result};
use crate::metrics::connected_components;
use crate::preprocess::{condition_scene, fit_scaler, smooth_mask, PreprocessConfig, ScalerParams, CHANNEL_NAMES};
use crate::raster::augment::patch_paste;
use crate::raster::tiling::tile;
use crate::raster::{filter_tiles, rasterize, DropReason, FilterConfig, LabelSet, Mask, Patch, Raster, TileOrigin, TileRecord, TilingConfig};
use crate::trainer::stream_seed;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PasteConfig {
    /// Synthetic tiles to build; 0 disables pasting.
    pub tiles: usize,
    /// Inclusive range of patches per synthetic tile.
    pub patches: (usize, usize),
    pub retries: usize,
}

impl Default for PasteConfig {
    fn default() -> Self {
        PasteConfig {
            tiles: 0,
            patches: (2, 5),
            retries: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub preprocess: PreprocessConfig,
    pub tiling: TilingConfig,
    pub filter: FilterConfig,
    pub paste: PasteConfig,
}

/// A conditioned scene with its label mask and every tile cut from it.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub id: u32,
    pub conditioned: Raster,
    pub mask: Mask,
    pub tiles: Vec<TileRecord>,
}

pub fn label_mask(labels: &LabelSet, width: usize, height: usize, cfg: &PreprocessConfig) -> Mask {
    smooth_mask(&rasterize(labels, width, height), cfg)
}

pub fn prepare_scene(raw: &Raster, labels: &LabelSet, id: u32, cfg: &DatasetConfig) -> Result<PreparedScene> {
    let conditioned = condition_scene(raw, &cfg.preprocess)?;
    let mask = label_mask(labels, raw.width, raw.height, &cfg.preprocess);
    let tiles = tile(&conditioned, &mask, id, &cfg.tiling)?;
    Ok(PreparedScene {
        id,
        conditioned,
        mask,
        tiles,
    })
}

/// Cutouts of every greenhouse component that lies strictly inside its tile.
pub fn harvest_patches(tiles: &[TileRecord]) -> Vec<Patch> {
    let mut out = Vec::new();
    for t in tiles {
        let comps = connected_components(&t.mask);
        let mut bbox = vec![(usize::MAX, usize::MAX, 0usize, 0usize); comps.count + 1];
        for y in 0..t.size {
            for x in 0..t.size {
                let l = comps.label(x, y) as usize;
                if l != 0 {
                    let b = &mut bbox[l];
                    *b = (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y));
                }
            }
        }
        for &(x0, y0, x1, y1) in bbox.iter().skip(1) {
            if x0 == 0 || y0 == 0 || x1 + 1 == t.size || y1 + 1 == t.size {
                continue;
            }
            out.push(Patch::cut(t, x0, y0, x1 - x0 + 1, y1 - y0 + 1));
        }
    }
    out
}

/// Builds `cfg.tiles` synthetic tiles by pasting random patches onto random
/// backgrounds. Each tile draws from its own stream, so the result does not
/// depend on thread scheduling.
pub fn paste_tiles(backgrounds: &[TileRecord], patches: &[Patch], cfg: &PasteConfig, tiling: &TilingConfig, seed: u64) -> Vec<TileRecord> {
    use rayon::prelude::*;
    if backgrounds.is_empty() || patches.is_empty() || cfg.tiles == 0 {
        return Vec::new();
    }
    (0..cfg.tiles)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 11, i as u64, 0));
            let bg = backgrounds.choose(&mut rng).expect("non-empty");
            let k = rng.random_range(cfg.patches.0..=cfg.patches.1.max(cfg.patches.0));
            let chosen: Vec<Patch> = (0..k).map(|_| patches.choose(&mut rng).expect("non-empty").clone()).collect();
            let mut t = patch_paste(bg, &chosen, cfg.retries, &tiling.weights, &mut rng).tile;
            t.origin = TileOrigin {
                raster: u32::MAX,
                x0: i as u32,
                y0: 0,
            };
            t
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropRecord {
    pub origin: TileOrigin,
    pub reason: DropReason,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub scenes: usize,
    pub tiles: usize,
    pub kept: usize,
    pub pasted: usize,
    pub dropped_positive_rate: usize,
    pub dropped_anomaly: usize,
}

/// Tiles of one split after filtering, plus the unfiltered set kept for
/// hard example mining.
#[derive(Debug, Clone, Default)]
pub struct Split {
    pub kept: Vec<TileRecord>,
    pub unfiltered: Vec<TileRecord>,
    pub dropped: Vec<DropRecord>,
    pub summary: SplitSummary,
}

/// Filters the pooled tiles of several scenes and, when enabled, adds pasted
/// tiles built from dropped backgrounds and kept greenhouses.
pub fn build_split(scenes: Vec<Vec<TileRecord>>, cfg: &DatasetConfig, paste: bool, seed: u64) -> Split {
    let n_scenes = scenes.len();
    let unfiltered: Vec<TileRecord> = scenes.into_iter().flatten().collect();
    let tiles = unfiltered.len();
    let (mut kept, dropped) = filter_tiles(unfiltered.clone(), &cfg.filter);
    let dropped: Vec<DropRecord> = dropped.into_iter().map(|(origin, reason)| DropRecord { origin, reason }).collect();
    let mut pasted = 0;
    if paste && cfg.paste.tiles > 0 {
        let bg: Vec<TileRecord> = unfiltered.iter().filter(|t| t.positive_rate == 0.0).cloned().collect();
        let patches = harvest_patches(&kept);
        let extra: Vec<TileRecord> = paste_tiles(&bg, &patches, &cfg.paste, &cfg.tiling, seed)
            .into_iter()
            .filter(|t| t.positive_rate >= cfg.filter.min_positive)
            .collect();
        pasted = extra.len();
        kept.extend(extra);
    }
    let summary = SplitSummary {
        scenes: n_scenes,
        tiles,
        kept: kept.len(),
        pasted,
        dropped_positive_rate: dropped.iter().filter(|d| d.reason == DropReason::PositiveRate).count(),
        dropped_anomaly: dropped.iter().filter(|d| d.reason == DropReason::Anomaly).count(),
    };
    Split {
        kept,
        unfiltered,
        dropped,
        summary,
    }
}

/// Scaler fitted on the kept training tiles only.
pub fn fit_train_scaler(train: &[TileRecord]) -> Result<ScalerParams> {
    if train.is_empty() {
        return Err(Error::invalid("training split", "no tiles survived filtering"));
    }
    fit_scaler(train, &CHANNEL_NAMES)
}
