//! Geometric and photometric augmentation, and synthetic tiles built by
//! pasting greenhouse cutouts onto background tiles.

use super::tiling::TileRecord;
use crate::metrics::WeightMapConfig;
use rand::Rng;

/// Rotates a square plane by `k` quarter turns counter-clockwise.
pub fn rotate_plane<T: Copy>(src: &[T], size: usize, k: usize) -> Vec<T> {
    let k = k % 4;
    if k == 0 {
        return src.to_vec();
    }
    let mut out = src.to_vec();
    let n = size;
    for y in 0..n {
        for x in 0..n {
            let (sx, sy) = match k {
                1 => (n - 1 - y, x),
                2 => (n - 1 - x, n - 1 - y),
                _ => (y, n - 1 - x),
            };
            out[y * n + x] = src[sy * n + sx];
        }
    }
    out
}

/// Mirrors a square plane left-right (`horizontal`) or top-bottom.
pub fn flip_plane<T: Copy>(src: &[T], size: usize, horizontal: bool) -> Vec<T> {
    let mut out = src.to_vec();
    for y in 0..size {
        for x in 0..size {
            let (sx, sy) = if horizontal { (size - 1 - x, y) } else { (x, size - 1 - y) };
            out[y * size + x] = src[sy * size + sx];
        }
    }
    out
}

fn map_geometry(tile: &TileRecord, f: impl Fn(&[f32]) -> Vec<f32>, g: impl Fn(&[u8]) -> Vec<u8>) -> TileRecord {
    let n = tile.size * tile.size;
    let mut out = tile.clone();
    for c in 0..tile.channels {
        out.data[c * n..(c + 1) * n].copy_from_slice(&f(tile.plane(c)));
    }
    out.mask.data = g(&tile.mask.data);
    if tile.weights.len() == n {
        out.weights = f(&tile.weights);
    }
    out
}

/// Quarter-turn rotation of channels, mask and weights together. Exact
/// Euclidean weight maps are rotation-equivariant, so they rotate along.
pub fn rotate_tile(tile: &TileRecord, k: usize) -> TileRecord {
    let s = tile.size;
    map_geometry(tile, |p| rotate_plane(p, s, k), |m| rotate_plane(m, s, k))
}

pub fn flip_tile(tile: &TileRecord, horizontal: bool) -> TileRecord {
    let s = tile.size;
    map_geometry(tile, |p| flip_plane(p, s, horizontal), |m| flip_plane(m, s, horizontal))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Probability of a flip; vertical and horizontal are equally likely.
    pub flip_prob: f64,
    /// Draw a rotation among the four right angles.
    pub rotate: bool,
    pub brightness: (f32, f32),
    pub contrast: (f32, f32),
    /// Probability of applying each photometric adjustment.
    pub photometric_prob: f64,
    /// Leading channels treated as spectral bands.
    pub spectral_channels: usize,
    /// Valid sample range of the spectral bands.
    pub clip: (f32, f32),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            rotate: true,
            brightness: (0.8, 1.4),
            contrast: (0.7, 1.3),
            photometric_prob: 0.5,
            spectral_channels: 4,
            clip: (0.0, 255.0),
        }
    }
}

pub fn brightness_factor(cfg: &AugmentConfig, rng: &mut impl Rng) -> f32 {
    rng.random_range(cfg.brightness.0..=cfg.brightness.1)
}

pub fn contrast_factor(cfg: &AugmentConfig, rng: &mut impl Rng) -> f32 {
    rng.random_range(cfg.contrast.0..=cfg.contrast.1)
}

/// `x·f`, clipped, on the spectral channels.
pub fn apply_brightness(tile: &mut TileRecord, f: f32, cfg: &AugmentConfig) {
    for c in 0..cfg.spectral_channels.min(tile.channels) {
        for v in tile.plane_mut(c) {
            *v = (*v * f).clamp(cfg.clip.0, cfg.clip.1);
        }
    }
}

/// `(x − mean)·f + mean` per spectral channel, clipped.
pub fn apply_contrast(tile: &mut TileRecord, f: f32, cfg: &AugmentConfig) {
    for c in 0..cfg.spectral_channels.min(tile.channels) {
        let p = tile.plane_mut(c);
        let mean = (p.iter().map(|&v| v as f64).sum::<f64>() / p.len() as f64) as f32;
        for v in p {
            *v = ((*v - mean) * f + mean).clamp(cfg.clip.0, cfg.clip.1);
        }
    }
}

/// One random draw of the augmentation pipeline.
pub fn augment(tile: &TileRecord, cfg: &AugmentConfig, rng: &mut impl Rng) -> TileRecord {
    let mut t = if rng.random_bool(cfg.flip_prob) {
        let horizontal = rng.random_bool(0.5);
        flip_tile(tile, horizontal)
    } else {
        tile.clone()
    };
    if cfg.rotate {
        let k = rng.random_range(0..4);
        if k != 0 {
            t = rotate_tile(&t, k);
        }
    }
    if rng.random_bool(cfg.photometric_prob) {
        let f = brightness_factor(cfg, rng);
        apply_brightness(&mut t, f, cfg);
    }
    if rng.random_bool(cfg.photometric_prob) {
        let f = contrast_factor(cfg, rng);
        apply_contrast(&mut t, f, cfg);
    }
    t
}

/// Rectangular greenhouse cutout with all channels of a tile.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// `channels × height × width`.
    pub data: Vec<f32>,
}

impl Patch {
    /// Copies the window `[x0, x0+w) × [y0, y0+h)` out of a tile.
    pub fn cut(tile: &TileRecord, x0: usize, y0: usize, w: usize, h: usize) -> Patch {
        let mut data = Vec::with_capacity(tile.channels * w * h);
        for c in 0..tile.channels {
            let p = tile.plane(c);
            for y in y0..y0 + h {
                data.extend_from_slice(&p[y * tile.size + x0..y * tile.size + x0 + w]);
            }
        }
        Patch {
            width: w,
            height: h,
            channels: tile.channels,
            data,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PasteOutcome {
    pub tile: TileRecord,
    /// `(x0, y0, w, h)` of every placed patch.
    pub placed: Vec<(usize, usize, usize, usize)>,
    /// Patches with no free position after the retry budget.
    pub skipped: usize,
}

/// Places each patch at a random free position of `background`. Footprints
/// never overlap; a patch that finds no free spot within `retries` draws is
/// skipped and counted.
pub fn patch_paste(
    background: &TileRecord,
    patches: &[Patch],
    retries: usize,
    weights: &WeightMapConfig,
    rng: &mut impl Rng,
) -> PasteOutcome {
    let s = background.size;
    let mut tile = background.clone();
    tile.mask.data.iter_mut().for_each(|v| *v = 0);
    let mut placed: Vec<(usize, usize, usize, usize)> = Vec::new();
    let mut skipped = 0;
    for p in patches {
        if p.width > s || p.height > s || p.channels != tile.channels {
            skipped += 1;
            continue;
        }
        let spot = (0..retries.max(1)).find_map(|_| {
            let x = rng.random_range(0..=s - p.width);
            let y = rng.random_range(0..=s - p.height);
            let free = placed
                .iter()
                .all(|&(qx, qy, qw, qh)| x + p.width <= qx || qx + qw <= x || y + p.height <= qy || qy + qh <= y);
            free.then_some((x, y))
        });
        let Some((x0, y0)) = spot else {
            skipped += 1;
            continue;
        };
        for c in 0..p.channels {
            let src = &p.data[c * p.width * p.height..(c + 1) * p.width * p.height];
            let dst = tile.plane_mut(c);
            for y in 0..p.height {
                dst[(y0 + y) * s + x0..(y0 + y) * s + x0 + p.width].copy_from_slice(&src[y * p.width..(y + 1) * p.width]);
            }
        }
        for y in y0..y0 + p.height {
            for x in x0..x0 + p.width {
                tile.mask.set(x, y, true);
            }
        }
        placed.push((x0, y0, p.width, p.height));
    }
    tile.refresh_labels(weights);
    PasteOutcome { tile, placed, skipped }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{Mask, TileOrigin};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tile() -> TileRecord {
        let size = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = (0..6 * size * size).map(|_| rng.random_range(0.0..255.0)).collect();
        let mask = Mask::from_fn(size, size, |x, y| x > 3 && x < 9 && y < 12 && (x + y) % 5 != 0);
        let mut t = TileRecord {
            size,
            channels: 6,
            data,
            mask,
            weights: vec![],
            origin: TileOrigin { raster: 0, x0: 0, y0: 0 },
            positive_rate: 0.0,
        };
        t.refresh_labels(&WeightMapConfig::default());
        t
    }

    #[test]
    fn rotations_compose() {
        let t = tile();
        assert_eq!(rotate_tile(&rotate_tile(&t, 2), 2), t);
        assert_eq!(rotate_tile(&rotate_tile(&t, 1), 3), t);
        assert_ne!(rotate_tile(&t, 1), t);
        assert_eq!(flip_tile(&flip_tile(&t, true), true), t);
    }

    #[test]
    fn rotation_direction() {
        // 2x2 [[a, b], [c, d]] turned counter-clockwise is [[b, d], [a, c]]
        assert_eq!(rotate_plane(&[1, 2, 3, 4], 2, 1), vec![2, 4, 1, 3]);
    }

    #[test]
    fn weight_map_rotates_with_mask() {
        let t = tile();
        for k in 1..4 {
            let r = rotate_tile(&t, k);
            let fresh = crate::metrics::unet_weight_map(&r.mask, &WeightMapConfig::default()).weights;
            for (a, b) in r.weights.iter().zip(&fresh) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn factors_stay_in_range() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut lo, mut hi) = (f32::MAX, f32::MIN);
        for _ in 0..10_000 {
            let f = brightness_factor(&cfg, &mut rng);
            lo = lo.min(f);
            hi = hi.max(f);
        }
        assert!(lo >= 0.8 && hi <= 1.4);
        assert!(lo < 0.81 && hi > 1.39);
    }

    #[test]
    fn photometric_leaves_mask_and_derived_channels() {
        let cfg = AugmentConfig::default();
        let t = tile();
        let mut b = t.clone();
        apply_brightness(&mut b, 1.3, &cfg);
        apply_contrast(&mut b, 0.75, &cfg);
        assert_eq!(b.mask, t.mask);
        assert_eq!(b.plane(4), t.plane(4));
        assert_eq!(b.plane(5), t.plane(5));
        assert!(b.plane(0).iter().all(|&v| (0.0..=255.0).contains(&v)));
    }

    #[test]
    fn augment_preserves_positive_count() {
        let t = tile();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            assert_eq!(augment(&t, &AugmentConfig::default(), &mut rng).mask.count(), t.mask.count());
        }
    }

    fn background(size: usize) -> TileRecord {
        TileRecord {
            size,
            channels: 2,
            data: vec![5.0; 2 * size * size],
            mask: Mask::zeros(size, size),
            weights: vec![],
            origin: TileOrigin { raster: 0, x0: 0, y0: 0 },
            positive_rate: 0.0,
        }
    }

    fn patch(w: usize, h: usize) -> Patch {
        Patch {
            width: w,
            height: h,
            channels: 2,
            data: vec![200.0; 2 * w * h],
        }
    }

    #[test]
    fn single_patch_area() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = patch_paste(&background(64), &[patch(10, 10)], 10, &WeightMapConfig::default(), &mut rng);
        assert_eq!(out.tile.positive_rate, 100.0 / 4096.0);
        assert_eq!(out.tile.plane(1).iter().filter(|&&v| v == 200.0).count(), 100);
    }

    #[test]
    fn no_patches_keep_background() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bg = background(64);
        let out = patch_paste(&bg, &[], 10, &WeightMapConfig::default(), &mut rng);
        assert_eq!(out.tile.data, bg.data);
        assert_eq!(out.tile.mask.count(), 0);
    }

    #[test]
    fn patches_are_disjoint_or_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = patch_paste(
            &background(32),
            &[patch(20, 20), patch(20, 20), patch(8, 8)],
            50,
            &WeightMapConfig::default(),
            &mut rng,
        );
        let area: usize = out.placed.iter().map(|p| p.2 * p.3).sum();
        assert_eq!(out.tile.mask.count(), area);
        assert_eq!(out.placed.len() + out.skipped, 3);
        assert!(out.skipped >= 1);
    }
}
