//! Robust per-channel standardization `(x − median) / IQR`.

use crate::error::{Error, Result};
use crate::raster::TileRecord;
use serde::{Deserialize, Serialize};

/// Guard for constant channels.
pub const IQR_EPS: f32 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalerParams {
    pub channels: Vec<String>,
    pub median: Vec<f32>,
    pub iqr: Vec<f32>,
}

/// Nearest-rank order statistic `q` (percent) of an unsorted buffer.
fn rank_select(values: &mut [f32], q: f64) -> f32 {
    let n = values.len();
    let rank = ((q / 100.0) * n as f64).ceil() as usize;
    let k = rank.clamp(1, n) - 1;
    *values.select_nth_unstable_by(k, f32::total_cmp).1
}

/// Median and IQR of one channel's samples.
pub fn robust_stats(values: &mut [f32]) -> (f32, f32) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let med = rank_select(values, 50.0);
    let q1 = rank_select(values, 25.0);
    let q3 = rank_select(values, 75.0);
    (med, (q3 - q1).max(0.0))
}

/// Fits on every pixel of every tile given; pass the training split only.
pub fn fit_scaler(tiles: &[TileRecord], channel_names: &[&str]) -> Result<ScalerParams> {
    let first = tiles
        .first()
        .ok_or_else(|| Error::invalid("fit_scaler", "needs at least one tile"))?;
    let c = first.channels;
    if channel_names.len() != c {
        return Err(Error::invalid(
            "fit_scaler",
            format!("{} channel names for {c} channels", channel_names.len()),
        ));
    }
    if tiles.iter().any(|t| t.channels != c) {
        return Err(Error::invalid("fit_scaler", "tiles differ in channel count"));
    }
    let stats: Vec<(f32, f32)> = (0..c)
        .map(|ch| {
            let mut v: Vec<f32> = tiles.iter().flat_map(|t| t.plane(ch).iter().copied()).collect();
            robust_stats(&mut v)
        })
        .collect();
    Ok(ScalerParams {
        channels: channel_names.iter().map(|s| s.to_string()).collect(),
        median: stats.iter().map(|s| s.0).collect(),
        iqr: stats.iter().map(|s| s.1).collect(),
    })
}

impl ScalerParams {
    pub fn len(&self) -> usize {
        self.median.len()
    }

    pub fn is_empty(&self) -> bool {
        self.median.is_empty()
    }

    #[inline]
    fn denom(&self, ch: usize) -> f32 {
        self.iqr[ch].max(IQR_EPS)
    }

    /// Standardizes channel-major planes in place.
    pub fn apply(&self, planes: &mut [f32], plane_len: usize) -> Result<()> {
        self.check(planes, plane_len)?;
        for (ch, p) in planes.chunks_mut(plane_len).enumerate() {
            let (m, d) = (self.median[ch], self.denom(ch));
            for v in p {
                *v = (*v - m) / d;
            }
        }
        Ok(())
    }

    pub fn inverse(&self, planes: &mut [f32], plane_len: usize) -> Result<()> {
        self.check(planes, plane_len)?;
        for (ch, p) in planes.chunks_mut(plane_len).enumerate() {
            let (m, d) = (self.median[ch], self.denom(ch));
            for v in p {
                *v = *v * d + m;
            }
        }
        Ok(())
    }

    fn check(&self, planes: &[f32], plane_len: usize) -> Result<()> {
        if plane_len == 0 || planes.len() != plane_len * self.len() {
            return Err(Error::invalid(
                "scaler",
                format!("{} samples do not form {} planes of {plane_len}", planes.len(), self.len()),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{Mask, TileOrigin};
    use proptest::prelude::*;

    fn tile_of(planes: Vec<Vec<f32>>, size: usize) -> TileRecord {
        TileRecord {
            size,
            channels: planes.len(),
            data: planes.concat(),
            mask: Mask::zeros(size, size),
            weights: vec![1.0; size * size],
            origin: TileOrigin { raster: 0, x0: 0, y0: 0 },
            positive_rate: 0.0,
        }
    }

    #[test]
    fn one_to_101() {
        let mut v: Vec<f32> = (1..=101).rev().map(|i| i as f32).collect();
        let (m, iqr) = robust_stats(&mut v);
        assert_eq!((m, iqr), (51.0, 50.0));
        let p = ScalerParams {
            channels: vec!["x".into()],
            median: vec![m],
            iqr: vec![iqr],
        };
        let mut x = vec![101.0];
        p.apply(&mut x, 1).unwrap();
        assert_eq!(x[0], 1.0);
    }

    #[test]
    fn constant_channel_scales_to_zero() {
        let t = tile_of(vec![vec![7.0; 4], (0..4).map(|i| i as f32).collect()], 2);
        let p = fit_scaler(std::slice::from_ref(&t), &["a", "b"]).unwrap();
        assert_eq!(p.iqr[0], 0.0);
        let mut d = t.data.clone();
        p.apply(&mut d, 4).unwrap();
        assert!(d[..4].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fit_needs_tiles_and_names() {
        assert!(fit_scaler(&[], &[]).is_err());
        let t = tile_of(vec![vec![0.0; 4]], 2);
        assert!(fit_scaler(&[t], &["a", "b"]).is_err());
    }

    #[test]
    fn applied_fit_set_has_zero_median() {
        let tiles: Vec<TileRecord> = (0..3)
            .map(|k| tile_of(vec![(0..16).map(|i| (i * 3 + k * 5) as f32).collect(), (0..16).map(|i| (i % 5) as f32 * 0.5).collect()], 4))
            .collect();
        let p = fit_scaler(&tiles, &["a", "b"]).unwrap();
        for ch in 0..2 {
            let mut v: Vec<f32> = tiles
                .iter()
                .flat_map(|t| {
                    let mut d = t.plane(ch).to_vec();
                    d.iter_mut().for_each(|x| *x = (*x - p.median[ch]) / p.iqr[ch].max(IQR_EPS));
                    d
                })
                .collect();
            assert_eq!(robust_stats(&mut v).0, 0.0);
        }
    }

    proptest! {
        #[test]
        fn apply_inverts(
            med in -100.0f32..100.0, iqr in 0.5f32..50.0, x in proptest::collection::vec(-500.0f32..500.0, 1..20)
        ) {
            let p = ScalerParams { channels: vec!["c".into()], median: vec![med], iqr: vec![iqr] };
            let mut y = x.clone();
            p.inverse(&mut y, x.len()).unwrap();
            p.apply(&mut y, x.len()).unwrap();
            for (a, b) in y.iter().zip(&x) {
                prop_assert!((a - b).abs() <= 4.0 * f32::EPSILON * b.abs().max(med.abs() / iqr).max(1.0));
            }
        }
    }
}
