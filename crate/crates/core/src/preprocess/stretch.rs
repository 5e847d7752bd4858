//! Percentile contrast stretch.

use super::Band;
use crate::raster::tiling::nearest_rank;

/// Output range of conditioned bands.
pub const OUT_MAX: f32 = 255.0;

/// Maps the `[P(lo), P(hi)]` interval linearly onto `[0, 255]` and clips
/// outside it. Percentiles are nearest-rank. A band whose two percentiles
/// coincide becomes the constant mid-range value.
pub fn contrast_stretch(band: &Band, lo_pct: f64, hi_pct: f64) -> Band {
    let mut sorted: Vec<f32> = band.data.iter().copied().filter(|v| v.is_finite()).collect();
    sorted.sort_by(f32::total_cmp);
    let lo = nearest_rank(&sorted, lo_pct);
    let hi = nearest_rank(&sorted, hi_pct);
    if hi <= lo {
        log::warn!("contrast stretch: degenerate percentiles {lo} == {hi}, emitting mid-range");
        return Band::filled(band.width, band.height, OUT_MAX / 2.0);
    }
    let scale = OUT_MAX / (hi - lo);
    let data = band.data.iter().map(|&v| ((v - lo) * scale).clamp(0.0, OUT_MAX)).collect();
    Band { width: band.width, height: band.height, data }
}
