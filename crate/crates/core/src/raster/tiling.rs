//! Overlapping square tiles and the dataset filters applied to them.

use super::{Mask, Raster};
use crate::error::{Error, Result};
use crate::metrics::{unet_weight_map, WeightMapConfig};
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct TileOrigin {
    pub raster: u32,
    pub x0: u32,
    pub y0: u32,
}

/// One training or inference sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TileRecord {
    pub size: usize,
    pub channels: usize,
    /// `channels × size × size`, channel planes in order.
    pub data: Vec<f32>,
    pub mask: Mask,
    pub weights: Vec<f32>,
    pub origin: TileOrigin,
    pub positive_rate: f32,
}

impl TileRecord {
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.size * self.size;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Recomputes `positive_rate` and the loss weight map from the mask.
    pub fn refresh_labels(&mut self, cfg: &WeightMapConfig) {
        self.positive_rate = self.mask.positive_rate();
        self.weights = unet_weight_map(&self.mask, cfg).weights;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TilingConfig {
    pub size: usize,
    pub stride: usize,
    pub weights: WeightMapConfig,
}

impl Default for TilingConfig {
    fn default() -> Self {
        TilingConfig {
            size: 64,
            stride: 32,
            weights: WeightMapConfig::default(),
        }
    }
}

/// Offsets `k·stride` that fit, plus one final offset flush with the far
/// edge when the regular grid leaves a remainder.
pub fn tile_origins(dim: usize, size: usize, stride: usize) -> Result<Vec<usize>> {
    if size == 0 || stride == 0 {
        return Err(Error::invalid("tiling", "size and stride must be positive"));
    }
    if dim < size {
        return Err(Error::invalid("tiling", format!("extent {dim} is smaller than tile size {size}")));
    }
    let mut v: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o + size <= dim).collect();
    if *v.last().unwrap() + size < dim {
        v.push(dim - size);
    }
    Ok(v)
}

/// Cuts `raster` (any sample type) and its mask into tiles in row-major
/// origin order, computing each tile's weight map.
pub fn tile(raster: &Raster, mask: &Mask, raster_id: u32, cfg: &TilingConfig) -> Result<Vec<TileRecord>> {
    if mask.width != raster.width || mask.height != raster.height {
        return Err(Error::invalid(
            "tiling",
            format!(
                "mask {}x{} does not match raster {}x{}",
                mask.width, mask.height, raster.width, raster.height
            ),
        ));
    }
    let xs = tile_origins(raster.width, cfg.size, cfg.stride)?;
    let ys = tile_origins(raster.height, cfg.size, cfg.stride)?;
    let bands: Vec<Vec<f32>> = (0..raster.bands).map(|b| raster.band_f32(b)).collect();
    let origins: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
    let size = cfg.size;
    Ok(origins
        .par_iter()
        .map(|&(x0, y0)| {
            let mut data = Vec::with_capacity(bands.len() * size * size);
            for b in &bands {
                for y in y0..y0 + size {
                    data.extend_from_slice(&b[y * raster.width + x0..y * raster.width + x0 + size]);
                }
            }
            let mut t = TileRecord {
                size,
                channels: bands.len(),
                data,
                mask: mask.crop(x0, y0, size, size),
                weights: Vec::new(),
                origin: TileOrigin {
                    raster: raster_id,
                    x0: x0 as u32,
                    y0: y0 as u32,
                },
                positive_rate: 0.0,
            };
            t.refresh_labels(&cfg.weights);
            t
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    PositiveRate,
    Anomaly,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    /// Tiles with a positive rate below this are dropped (`>=` keeps).
    pub min_positive: f32,
    /// Robust z-score above which a tile's band mean counts as anomalous.
    pub anomaly_z: f32,
    /// Leading channels inspected by the anomaly test.
    pub anomaly_channels: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_positive: 0.1,
            anomaly_z: 6.0,
            anomaly_channels: 4,
        }
    }
}

/// Nearest-rank percentile of sorted data, `q` in `[0, 100]`.
pub fn nearest_rank(sorted: &[f32], q: f64) -> f32 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((q / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

const IQR_FLOOR: f64 = 1e-6;

/// Robust z-scores `(v − median)/IQR` of one value per tile.
fn robust_z(values: &[f64]) -> Vec<f64> {
    let mut s: Vec<f32> = values.iter().map(|&v| v as f32).collect();
    s.sort_by(f32::total_cmp);
    let med = nearest_rank(&s, 50.0) as f64;
    let iqr = (nearest_rank(&s, 75.0) - nearest_rank(&s, 25.0)) as f64;
    values.iter().map(|v| (v - med).abs() / iqr.max(IQR_FLOOR)).collect()
}

/// Drops tiles below the positive-rate floor and tiles whose mean in any
/// inspected channel is a robust outlier against all input tiles. Returns
/// the kept tiles in input order and the origin and reason of each drop.
pub fn filter_tiles(tiles: Vec<TileRecord>, cfg: &FilterConfig) -> (Vec<TileRecord>, Vec<(TileOrigin, DropReason)>) {
    let channels = tiles.first().map_or(0, |t| t.channels.min(cfg.anomaly_channels));
    let mut anomalous = vec![false; tiles.len()];
    if tiles.len() >= 4 {
        for c in 0..channels {
            let means: Vec<f64> = tiles
                .iter()
                .map(|t| t.plane(c).iter().map(|&v| v as f64).sum::<f64>() / (t.size * t.size) as f64)
                .collect();
            for (a, z) in anomalous.iter_mut().zip(robust_z(&means)) {
                *a |= z > cfg.anomaly_z as f64;
            }
        }
    }
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (t, anomaly) in tiles.into_iter().zip(anomalous) {
        if t.positive_rate < cfg.min_positive {
            dropped.push((t.origin, DropReason::PositiveRate));
        } else if anomaly {
            dropped.push((t.origin, DropReason::Anomaly));
        } else {
            kept.push(t);
        }
    }
    (kept, dropped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Affine;
    use rand::{Rng, SeedableRng};

    #[test]
    fn origin_counts() {
        assert_eq!(tile_origins(128, 64, 32).unwrap(), vec![0, 32, 64]);
        assert_eq!(tile_origins(64, 64, 32).unwrap(), vec![0]);
        assert_eq!(tile_origins(100, 64, 32).unwrap(), vec![0, 32, 36]);
        assert!(tile_origins(63, 64, 32).is_err());
    }

    #[test]
    fn coverage_counts() {
        for dim in [128usize, 160, 256, 320, 512] {
            let o = tile_origins(dim, 64, 32).unwrap();
            let mut cover = vec![0u32; dim];
            for &x in &o {
                for c in &mut cover[x..x + 64] {
                    *c += 1;
                }
            }
            assert!(cover.iter().all(|&c| c >= 1));
            // 1-D interior coverage of 2 means 4 in 2-D
            assert!(cover[32..dim - 32].iter().all(|&c| c == 2), "dim {dim}");
        }
    }

    fn raster(w: usize, h: usize, f: impl Fn(usize, usize, usize) -> u16) -> Raster {
        let mut d = Vec::new();
        for b in 0..4 {
            for y in 0..h {
                for x in 0..w {
                    d.push(f(b, x, y));
                }
            }
        }
        Raster::new_u16(w, h, 4, d, Affine::IDENTITY).unwrap()
    }

    #[test]
    fn tiles_carry_their_window() {
        let r = raster(100, 64, |b, x, y| (b * 1000 + y * 10 + x) as u16);
        let m = Mask::from_fn(100, 64, |x, _| x >= 50);
        let tiles = tile(&r, &m, 3, &TilingConfig::default()).unwrap();
        assert_eq!(tiles.len(), 3);
        let t = &tiles[2];
        assert_eq!(t.origin, TileOrigin { raster: 3, x0: 36, y0: 0 });
        assert_eq!(t.plane(2)[5 * 64 + 1], (2000 + 50 + 37) as f32);
        assert_eq!(t.positive_rate, t.mask.positive_rate());
        assert_eq!(t.mask.count(), 50 * 64);
    }

    fn tile_with(rate_pixels: usize, value: f32) -> TileRecord {
        let mut mask = Mask::zeros(64, 64);
        for i in 0..rate_pixels {
            mask.data[i] = 1;
        }
        let mut t = TileRecord {
            size: 64,
            channels: 4,
            data: vec![value; 4 * 64 * 64],
            mask,
            weights: vec![],
            origin: TileOrigin { raster: 0, x0: 0, y0: 0 },
            positive_rate: 0.0,
        };
        t.positive_rate = t.mask.positive_rate();
        t
    }

    #[test]
    fn background_tile_dropped_boundary_kept() {
        let (kept, dropped) = filter_tiles(vec![tile_with(0, 10.0)], &FilterConfig::default());
        assert!(kept.is_empty());
        assert_eq!(dropped[0].1, DropReason::PositiveRate);
        // 0.1 of 4096 pixels is not an integer; 0.1 exactly needs 10 of 100
        let mut t = tile_with(0, 1.0);
        t.positive_rate = 0.1;
        let (kept, _) = filter_tiles(vec![t], &FilterConfig::default());
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn saturated_tile_is_anomalous() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut tiles: Vec<TileRecord> = (0..30).map(|_| tile_with(2048, rng.random_range(900.0..1300.0))).collect();
        tiles.insert(11, tile_with(2048, 4095.0));
        let (kept, dropped) = filter_tiles(tiles, &FilterConfig::default());
        assert_eq!(kept.len(), 30);
        assert_eq!(dropped.len(), 1);
        assert_eq!(dropped[0].1, DropReason::Anomaly);
    }

    #[test]
    fn positive_filter_commutes_with_concatenation() {
        let cfg = FilterConfig {
            anomaly_z: f32::INFINITY,
            ..FilterConfig::default()
        };
        let a = raster(160, 96, |b, x, y| (b + x + y) as u16);
        let b = raster(128, 128, |b, x, y| (b * x * y % 4096) as u16);
        let ma = Mask::from_fn(160, 96, |x, y| x > 70 && y > 20);
        let mb = Mask::from_fn(128, 128, |x, y| (x / 10 + y / 10) % 3 == 0);
        let ta = tile(&a, &ma, 0, &TilingConfig::default()).unwrap();
        let tb = tile(&b, &mb, 1, &TilingConfig::default()).unwrap();
        let mut separate = filter_tiles(ta.clone(), &cfg).0;
        separate.extend(filter_tiles(tb.clone(), &cfg).0);
        let joint = filter_tiles(ta.into_iter().chain(tb).collect(), &cfg).0;
        assert_eq!(separate, joint);
    }

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<f32> = (0..=100).map(|i| i as f32).collect();
        assert_eq!(nearest_rank(&v, 2.0), 2.0);
        assert_eq!(nearest_rank(&v, 98.0), 98.0);
        assert_eq!(nearest_rank(&v, 50.0), 50.0);
    }
}
