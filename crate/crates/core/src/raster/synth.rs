//! Deterministic synthetic scenes: greenhouse rectangles painted over a
//! patchwork of land-cover classes, with optional haze and shadows.

use super::labels::{rasterize_polygon, LabelPolygon, LabelSet};
use super::{Affine, Mask, Raster, RAW_MAX};
use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Mean raw response `[R, G, B, NIR]` of one surface type.
pub type Spectrum = [f32; 4];

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// Inclusive range of the number of greenhouses to place.
    pub greenhouse_count: (usize, usize),
    /// Inclusive range of rectangle side lengths in pixels.
    pub side: (usize, usize),
    /// Rotation range in degrees; `(0, 0)` keeps rectangles axis-aligned.
    pub orientation_deg: (f64, f64),
    /// Minimum free pixels between two greenhouses.
    pub min_gap: usize,
    pub greenhouse: Spectrum,
    /// Background classes; each pixel takes the class with the largest
    /// smooth random field.
    pub background: Vec<Spectrum>,
    /// Side of the coarse grid behind the background fields.
    pub patch_scale: usize,
    pub haze_prob: f64,
    pub haze_strength: f32,
    pub shadow_prob: f64,
    pub shadow_strength: f32,
    pub noise_sigma: f32,
    pub pixel_size: f64,
    pub origin: (f64, f64),
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            seed: 0,
            width: 256,
            height: 256,
            greenhouse_count: (6, 14),
            side: (8, 28),
            orientation_deg: (0.0, 0.0),
            min_gap: 3,
            greenhouse: [2500.0, 2600.0, 2700.0, 2300.0],
            background: vec![
                // vegetation
                [450.0, 700.0, 380.0, 2600.0],
                // dry land
                [1500.0, 1380.0, 1150.0, 1900.0],
                // built-up
                [1650.0, 1600.0, 1550.0, 1700.0],
                // water
                [220.0, 330.0, 450.0, 120.0],
            ],
            patch_scale: 48,
            haze_prob: 0.3,
            haze_strength: 0.35,
            shadow_prob: 0.3,
            shadow_strength: 0.4,
            noise_sigma: 40.0,
            pixel_size: 0.5,
            origin: (500_000.0, 4_400_000.0),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: &str| Err(Error::invalid("scene config", d.to_string()));
        if self.width == 0 || self.height == 0 {
            return bad("empty scene");
        }
        if self.greenhouse_count.0 > self.greenhouse_count.1 || self.side.0 > self.side.1 || self.side.0 < 2 {
            return bad("inverted or degenerate range");
        }
        if self.side.1 >= self.width.min(self.height) {
            return bad("greenhouse side exceeds the scene");
        }
        if self.background.is_empty() || self.patch_scale == 0 {
            return bad("need at least one background class and a positive patch scale");
        }
        if !(0.0..=1.0).contains(&self.haze_prob) || !(0.0..=1.0).contains(&self.shadow_prob) {
            return bad("probabilities must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn transform(&self) -> Affine {
        Affine([self.origin.0, self.pixel_size, 0.0, self.origin.1, 0.0, -self.pixel_size])
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub raster: Raster,
    /// Pixel-space rectangles, one per greenhouse.
    pub labels: LabelSet,
    /// The painter's own footprint.
    pub mask: Mask,
}

/// Bilinear interpolation of a coarse random grid.
fn smooth_field(w: usize, h: usize, scale: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let gw = w / scale + 2;
    let gh = h / scale + 2;
    let grid: Vec<f32> = (0..gw * gh).map(|_| rng.random::<f32>()).collect();
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let fy = y as f32 / scale as f32;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = x as f32 / scale as f32;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let g = |i: usize, j: usize| grid[j * gw + i];
            let top = g(x0, y0) * (1.0 - tx) + g(x0 + 1, y0) * tx;
            let bot = g(x0, y0 + 1) * (1.0 - tx) + g(x0 + 1, y0 + 1) * tx;
            out[y * w + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

fn rotated_rect(cx: f64, cy: f64, w: f64, h: f64, angle: f64) -> LabelPolygon {
    if angle == 0.0 {
        let (x0, y0) = ((cx - w / 2.0).round(), (cy - h / 2.0).round());
        return LabelPolygon::rect(x0, y0, x0 + w, y0 + h);
    }
    let (s, c) = angle.sin_cos();
    let corner = |dx: f64, dy: f64| (cx + dx * c - dy * s, cy + dx * s + dy * c);
    let (hw, hh) = (w / 2.0, h / 2.0);
    let pts = [corner(-hw, -hh), corner(hw, -hh), corner(hw, hh), corner(-hw, hh)];
    let mut ring = pts.to_vec();
    ring.push(pts[0]);
    LabelPolygon::new(ring, Vec::new())
}

/// Generates one scene. Identical configurations give identical scenes.
pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // land-cover patchwork
    let fields: Vec<Vec<f32>> = cfg
        .background
        .iter()
        .map(|_| smooth_field(w, h, cfg.patch_scale, &mut rng))
        .collect();
    let detail = smooth_field(w, h, 6, &mut rng);
    let mut bands = vec![vec![0.0f32; w * h]; 4];
    for i in 0..w * h {
        let class = (0..fields.len())
            .max_by(|&a, &b| fields[a][i].total_cmp(&fields[b][i]))
            .unwrap();
        let tex = 0.85 + 0.3 * detail[i];
        for b in 0..4 {
            bands[b][i] = cfg.background[class][b] * tex;
        }
    }

    // greenhouses
    let mut mask = Mask::zeros(w, h);
    let mut polygons = Vec::new();
    let count = rng.random_range(cfg.greenhouse_count.0..=cfg.greenhouse_count.1);
    for _ in 0..count {
        for _attempt in 0..60 {
            let gw = rng.random_range(cfg.side.0..=cfg.side.1) as f64;
            let gh = rng.random_range(cfg.side.0..=cfg.side.1) as f64;
            let angle = if cfg.orientation_deg.0 == cfg.orientation_deg.1 {
                cfg.orientation_deg.0
            } else {
                rng.random_range(cfg.orientation_deg.0..cfg.orientation_deg.1)
            }
            .to_radians();
            let reach = 0.5 * (gw * gw + gh * gh).sqrt() + 1.0;
            let margin = if angle == 0.0 { 0.5 * gw.max(gh) + 1.0 } else { reach };
            if 2.0 * margin >= w.min(h) as f64 {
                continue;
            }
            let cx = rng.random_range(margin..w as f64 - margin);
            let cy = rng.random_range(margin..h as f64 - margin);
            let poly = rotated_rect(cx, cy, gw, gh, angle);
            let mut fp = Mask::zeros(w, h);
            rasterize_polygon(&poly, &mut fp);
            if fp.count() == 0 || !clear_of(&mask, &fp, cfg.min_gap) {
                continue;
            }
            let gain: f32 = rng.random_range(0.85..1.15);
            let period = rng.random_range(3..6);
            let along_x = gw >= gh;
            for y in 0..h {
                for x in 0..w {
                    if !fp.get(x, y) {
                        continue;
                    }
                    let i = y * w + x;
                    let row = if along_x { y } else { x };
                    let stripe = if row % period == 0 { 0.9 } else { 1.0 };
                    for b in 0..4 {
                        bands[b][i] = cfg.greenhouse[b] * gain * stripe;
                    }
                    mask.set(x, y, true);
                }
            }
            polygons.push(poly);
            break;
        }
    }

    // atmospheric haze
    if rng.random_bool(cfg.haze_prob) {
        let cx = rng.random_range(0.0..w as f32);
        let cy = rng.random_range(0.0..h as f32);
        let sigma = rng.random_range(0.2..0.5) * w.max(h) as f32;
        for y in 0..h {
            for x in 0..w {
                let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                let a = cfg.haze_strength * (-d2 / (2.0 * sigma * sigma)).exp();
                for band in &mut bands {
                    let v = &mut band[y * w + x];
                    *v = *v * (1.0 - a) + 3000.0 * a;
                }
            }
        }
    }

    // cloud or terrain shadow: a dark quadrilateral
    if rng.random_bool(cfg.shadow_prob) {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let r = rng.random_range(0.1..0.3) * w.min(h) as f64;
        let mut ring: Vec<(f64, f64)> = (0..4)
            .map(|k| {
                let a = std::f64::consts::FRAC_PI_2 * k as f64 + rng.random_range(-0.4..0.4);
                let rr = r * rng.random_range(0.6..1.4);
                (cx + rr * a.cos(), cy + rr * a.sin())
            })
            .collect();
        ring.push(ring[0]);
        let mut sm = Mask::zeros(w, h);
        rasterize_polygon(&LabelPolygon::new(ring, vec![]), &mut sm);
        for (i, &s) in sm.data.iter().enumerate() {
            if s != 0 {
                for band in &mut bands {
                    band[i] *= 1.0 - cfg.shadow_strength;
                }
            }
        }
    }

    let noise = Normal::new(0.0f32, cfg.noise_sigma.max(0.0)).map_err(|e| Error::invalid("scene config", e.to_string()))?;
    let mut data = Vec::with_capacity(4 * w * h);
    for band in &bands {
        for &v in band {
            let n = if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            data.push((v + n).round().clamp(0.0, RAW_MAX as f32) as u16);
        }
    }
    let raster = Raster::new_u16(w, h, 4, data, cfg.transform())?;
    Ok(Scene {
        raster,
        labels: LabelSet {
            polygons,
            ..Default::default()
        },
        mask,
    })
}

/// No pixel of `fp` within Chebyshev distance `gap` of a set pixel of `mask`.
fn clear_of(mask: &Mask, fp: &Mask, gap: usize) -> bool {
    let (w, h) = (mask.width, mask.height);
    for y in 0..h {
        for x in 0..w {
            if !fp.get(x, y) {
                continue;
            }
            for yy in y.saturating_sub(gap)..(y + gap + 1).min(h) {
                for xx in x.saturating_sub(gap)..(x + gap + 1).min(w) {
                    if mask.get(xx, yy) {
                        return false;
                    }
                }
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::connected_components;
    use crate::raster::labels::rasterize;

    fn small(seed: u64) -> SceneConfig {
        SceneConfig {
            seed,
            width: 96,
            height: 96,
            greenhouse_count: (3, 6),
            side: (6, 16),
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate_scene(&small(7)).unwrap();
        let b = generate_scene(&small(7)).unwrap();
        assert_eq!(a.raster, b.raster);
        assert_eq!(a.labels, b.labels);
        let c = generate_scene(&small(8)).unwrap();
        assert_ne!(a.raster, c.raster);
    }

    #[test]
    fn exact_count() {
        let cfg = SceneConfig {
            greenhouse_count: (5, 5),
            ..small(3)
        };
        let s = generate_scene(&cfg).unwrap();
        assert_eq!(s.labels.polygons.len(), 5);
        assert_eq!(connected_components(&s.mask).count, 5);
    }

    #[test]
    fn labels_match_painter() {
        for seed in 0..5 {
            let mut cfg = small(seed);
            if seed % 2 == 1 {
                cfg.orientation_deg = (-40.0, 40.0);
            }
            let s = generate_scene(&cfg).unwrap();
            assert_eq!(rasterize(&s.labels, 96, 96), s.mask);
        }
    }

    #[test]
    fn samples_in_raw_range() {
        let s = generate_scene(&small(1)).unwrap();
        assert!(s.raster.band_u16(3).unwrap().iter().all(|&v| v <= RAW_MAX));
    }
}
