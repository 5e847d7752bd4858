//! Per-pixel loss weights: class balancing plus a separation term that
//! grows in the narrow gaps between neighbouring objects.

use super::components::{connected_components, Components};
use crate::raster::Mask;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WeightMapConfig {
    pub w0: f64,
    pub sigma: f64,
}

impl Default for WeightMapConfig {
    fn default() -> Self {
        WeightMapConfig { w0: 10.0, sigma: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    pub width: usize,
    pub height: usize,
    pub weights: Vec<f32>,
    pub class_balance: Vec<f32>,
}

const FAR: f64 = 1e20;

/// Exact 1-D squared distance transform of a sampled function (lower
/// envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let qf = q as f64;
        let mut s;
        loop {
            let vk = v[k] as f64;
            s = ((f[q] + qf * qf) - (f[v[k]] + vk * vk)) / (2.0 * qf - 2.0 * vk);
            // z[0] is -inf, so k never underflows
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest seed pixel.
fn squared_edt(width: usize, height: usize, seeds: &[(usize, usize)]) -> Vec<f64> {
    let mut grid = vec![FAR; width * height];
    for &(x, y) in seeds {
        grid[y * width + x] = 0.0;
    }
    let n = width.max(height);
    let mut f = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    for x in 0..width {
        for y in 0..height {
            f[y] = grid[y * width + x];
        }
        edt_1d(&f[..height], &mut d[..height], &mut v, &mut z);
        for y in 0..height {
            grid[y * width + x] = d[y];
        }
    }
    for y in 0..height {
        let row = &mut grid[y * width..(y + 1) * width];
        f[..width].copy_from_slice(row);
        edt_1d(&f[..width], &mut d[..width], &mut v, &mut z);
        row.copy_from_slice(&d[..width]);
    }
    grid
}

/// Distances to the border of the nearest (`d1`) and second nearest (`d2`)
/// distinct object, `f32::INFINITY` where fewer objects exist.
pub fn border_distances(components: &Components) -> (Vec<f32>, Vec<f32>) {
    let (d1, d2) = border_distances_f64(components);
    (
        d1.iter().map(|&v| v as f32).collect(),
        d2.iter().map(|&v| v as f32).collect(),
    )
}

fn border_distances_f64(components: &Components) -> (Vec<f64>, Vec<f64>) {
    let n = components.width * components.height;
    let mut d1 = vec![f64::INFINITY; n];
    let mut d2 = vec![f64::INFINITY; n];
    let borders = components.border_pixels();
    for seeds in borders.iter().skip(1) {
        if seeds.is_empty() {
            continue;
        }
        let sq = squared_edt(components.width, components.height, seeds);
        for i in 0..n {
            let d = sq[i].sqrt();
            if d < d1[i] {
                d2[i] = d1[i];
                d1[i] = d;
            } else if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    (d1, d2)
}

/// `N_total / (2·N_class(p))`, class counts floored at one pixel.
pub fn class_balance_map(mask: &Mask) -> Vec<f32> {
    let total = mask.data.len() as f64;
    let pos = mask.count() as f64;
    let neg = total - pos;
    let wp = (total / (2.0 * pos.max(1.0))) as f32;
    let wn = (total / (2.0 * neg.max(1.0))) as f32;
    mask.data.iter().map(|&v| if v != 0 { wp } else { wn }).collect()
}

/// `w = w_c + w0·exp(−(d1+d2)²/(2σ²))`; the separation term is zero when the
/// mask holds fewer than two objects.
pub fn unet_weight_map(mask: &Mask, cfg: &WeightMapConfig) -> WeightMap {
    let wc = class_balance_map(mask);
    let comps = connected_components(mask);
    let weights = if comps.count < 2 {
        wc.clone()
    } else {
        let (d1, d2) = border_distances_f64(&comps);
        wc.iter()
            .zip(d1.iter().zip(&d2))
            .map(|(&c, (&a, &b))| (c as f64 + separation_term(a, b, cfg)) as f32)
            .collect()
    };
    WeightMap {
        width: mask.width,
        height: mask.height,
        weights,
        class_balance: wc,
    }
}

#[inline]
pub(crate) fn separation_term(d1: f64, d2: f64, cfg: &WeightMapConfig) -> f64 {
    let s = d1 + d2;
    cfg.w0 * (-(s * s) / (2.0 * cfg.sigma * cfg.sigma)).exp()
}
