//! Contrast limited adaptive histogram equalization.

use super::Band;

pub const BINS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClaheConfig {
    /// Tile grid, columns × rows.
    pub tiles: (usize, usize),
    /// Histogram clip as a multiple of the mean bin height. `f32::INFINITY`
    /// disables clipping.
    pub clip_limit: f32,
}

impl Default for ClaheConfig {
    fn default() -> Self {
        ClaheConfig {
            tiles: (8, 8),
            clip_limit: 2.0,
        }
    }
}

#[inline]
pub(crate) fn bin_of(v: f32) -> usize {
    if v.is_nan() {
        return 0;
    }
    v.round().clamp(0.0, (BINS - 1) as f32) as usize
}

/// Tile boundaries `[start, end)` splitting `n` into `k` nearly equal parts.
fn bounds(n: usize, k: usize) -> Vec<(usize, usize)> {
    (0..k).map(|i| (i * n / k, (i + 1) * n / k)).collect()
}

/// Clips a histogram at `limit` and spreads the excess over all bins, with
/// the integer remainder going to evenly spaced bins from the first.
fn clip_histogram(hist: &mut [u32; BINS], limit: u32) {
    let mut excess = 0u32;
    for h in hist.iter_mut() {
        if *h > limit {
            excess += *h - limit;
            *h = limit;
        }
    }
    let batch = excess / BINS as u32;
    let mut residual = excess - batch * BINS as u32;
    for h in hist.iter_mut() {
        *h += batch;
    }
    if residual > 0 {
        let step = (BINS / residual as usize).max(1);
        let mut i = 0;
        while i < BINS && residual > 0 {
            hist[i] += 1;
            residual -= 1;
            i += step;
        }
    }
}

/// Equalization lookup table of one tile.
fn tile_lut(band: &Band, xs: (usize, usize), ys: (usize, usize), clip_limit: f32) -> [f32; BINS] {
    let mut hist = [0u32; BINS];
    for y in ys.0..ys.1 {
        for &v in &band.data[y * band.width + xs.0..y * band.width + xs.1] {
            hist[bin_of(v)] += 1;
        }
    }
    let area = ((xs.1 - xs.0) * (ys.1 - ys.0)) as u32;
    if clip_limit.is_finite() && clip_limit > 0.0 {
        let limit = ((clip_limit * area as f32 / BINS as f32) as u32).max(1);
        clip_histogram(&mut hist, limit);
    }
    let scale = (BINS - 1) as f32 / area.max(1) as f32;
    let mut lut = [0.0f32; BINS];
    let mut sum = 0u32;
    for (l, &h) in lut.iter_mut().zip(&hist) {
        sum += h;
        *l = (sum as f32 * scale).min((BINS - 1) as f32);
    }
    lut
}

/// Bilinear lookup weights along one axis: lower tile, upper tile, weight
/// of the upper tile.
pub(crate) fn blend_axis(pos: usize, n: usize, tiles: usize) -> (usize, usize, f32) {
    let size = n as f32 / tiles as f32;
    let f = (pos as f32 + 0.5) / size - 0.5;
    let lo = f.floor();
    let a = f - lo;
    let lo = lo as isize;
    let t0 = lo.clamp(0, tiles as isize - 1) as usize;
    let t1 = (lo + 1).clamp(0, tiles as isize - 1) as usize;
    (t0, t1, a)
}

/// Values are expected on the 0–255 scale and are binned by rounding.
/// Output lies on the same scale.
pub fn clahe(band: &Band, cfg: &ClaheConfig) -> Band {
    let (w, h) = (band.width, band.height);
    if w == 0 || h == 0 {
        return band.clone();
    }
    let tx = cfg.tiles.0.clamp(1, w);
    let ty = cfg.tiles.1.clamp(1, h);
    let (bx, by) = (bounds(w, tx), bounds(h, ty));
    let mut luts = Vec::with_capacity(tx * ty);
    for &ys in &by {
        for &xs in &bx {
            luts.push(tile_lut(band, xs, ys, cfg.clip_limit));
        }
    }
    let cols: Vec<(usize, usize, f32)> = (0..w).map(|x| blend_axis(x, w, tx)).collect();
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        let (r0, r1, ya) = blend_axis(y, h, ty);
        for x in 0..w {
            let (c0, c1, xa) = cols[x];
            let b = bin_of(band.data[y * w + x]);
            let top = luts[r0 * tx + c0][b] * (1.0 - xa) + luts[r0 * tx + c1][b] * xa;
            let bot = luts[r1 * tx + c0][b] * (1.0 - xa) + luts[r1 * tx + c1][b] * xa;
            out[y * w + x] = top * (1.0 - ya) + bot * ya;
        }
    }
    Band { width: w, height: h, data: out }
}
