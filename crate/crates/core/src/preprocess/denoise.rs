//! Non-local means denoising.

use super::{reflect101, Band};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiseConfig {
    /// Filter strength on the 0–255 intensity scale.
    pub h: f32,
    pub patch: usize,
    pub search: usize,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        DenoiseConfig {
            h: 10.0,
            patch: 7,
            search: 21,
        }
    }
}

/// Every pixel becomes the average of the pixels in its search window,
/// weighted by `exp(−d/h²)` where `d` is the mean squared difference of the
/// two surrounding patches. Borders are reflected.
///
/// Patch distances for one displacement are box sums of a squared
/// difference image, so the cost is independent of the patch size.
pub fn nl_means_denoise(band: &Band, cfg: &DenoiseConfig) -> Result<Band> {
    if cfg.patch.is_multiple_of(2) || cfg.search.is_multiple_of(2) {
        return Err(Error::invalid("nl_means_denoise", "patch and search sizes must be odd"));
    }
    let (w, h) = (band.width, band.height);
    if w == 0 || h == 0 {
        return Ok(band.clone());
    }
    if cfg.h <= 0.0 {
        return Ok(band.clone());
    }
    let pr = cfg.patch / 2;
    let sr = cfg.search / 2;
    let pad = pr + sr;
    let (pw, ph) = (w + 2 * pad, h + 2 * pad);
    let mut padded = vec![0.0f32; pw * ph];
    for y in 0..ph {
        let sy = reflect101(y as isize - pad as isize, h);
        for x in 0..pw {
            let sx = reflect101(x as isize - pad as isize, w);
            padded[y * pw + x] = band.data[sy * w + sx];
        }
    }
    let inv = 1.0 / (cfg.h * cfg.h * (cfg.patch * cfg.patch) as f32);
    let mut acc = vec![0.0f32; w * h];
    let mut wsum = vec![0.0f32; w * h];
    // squared differences over the region the patches of output pixels touch
    let (rw, rh) = (w + 2 * pr, h + 2 * pr);
    let mut diff = vec![0.0f32; rw * rh];
    let mut rows = vec![0.0f32; w * rh];
    for dy in -(sr as isize)..=sr as isize {
        for dx in -(sr as isize)..=sr as isize {
            for y in 0..rh {
                let a = (y + sr) * pw + sr;
                let b = ((y + sr) as isize + dy) as usize * pw + (sr as isize + dx) as usize;
                let (ra, rb) = (&padded[a..a + rw], &padded[b..b + rw]);
                for ((d, &p), &q) in diff[y * rw..(y + 1) * rw].iter_mut().zip(ra).zip(rb) {
                    *d = (p - q) * (p - q);
                }
            }
            // horizontal box sums of width `patch`
            for y in 0..rh {
                let src = &diff[y * rw..(y + 1) * rw];
                let dst = &mut rows[y * w..(y + 1) * w];
                let mut s: f32 = src[..cfg.patch].iter().sum();
                dst[0] = s;
                for x in 1..w {
                    s += src[x + cfg.patch - 1] - src[x - 1];
                    dst[x] = s;
                }
            }
            // vertical box sums, weights and accumulation
            let mut col = vec![0.0f32; w];
            for y in 0..cfg.patch {
                for (c, &r) in col.iter_mut().zip(&rows[y * w..(y + 1) * w]) {
                    *c += r;
                }
            }
            for y in 0..h {
                if y > 0 {
                    let (add, sub) = ((y + cfg.patch - 1) * w, (y - 1) * w);
                    for x in 0..w {
                        col[x] += rows[add + x] - rows[sub + x];
                    }
                }
                let q = ((y + pad) as isize + dy) as usize * pw + (pad as isize + dx) as usize;
                let nb = &padded[q..q + w];
                let (a, ws) = (&mut acc[y * w..(y + 1) * w], &mut wsum[y * w..(y + 1) * w]);
                for x in 0..w {
                    let wt = (-col[x].max(0.0) * inv).exp();
                    a[x] += wt * nb[x];
                    ws[x] += wt;
                }
            }
        }
    }
    let data = acc.iter().zip(&wsum).map(|(&a, &s)| a / s).collect();
    Ok(Band { width: w, height: h, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_is_fixed() {
        let b = Band::filled(20, 13, 77.0);
        let out = nl_means_denoise(&b, &DenoiseConfig::default()).unwrap();
        for v in out.data {
            assert!((v - 77.0).abs() < 1e-4);
        }
    }

    #[test]
    fn salt_pixel_is_attenuated() {
        let mut b = Band::filled(9, 9, 100.0);
        b.data[4 * 9 + 4] = 200.0;
        let cfg = DenoiseConfig {
            h: 30.0,
            patch: 3,
            search: 5,
        };
        let out = nl_means_denoise(&b, &cfg).unwrap();
        let dev = (out.get(4, 4) - 100.0).abs();
        assert!(dev < 100.0 && dev > 0.0, "{dev}");
    }

    #[test]
    fn tiny_h_is_identity() {
        let b = Band::from_fn(16, 16, |x, y| ((x * 37 + y * 11) % 23) as f32 * 9.0);
        let cfg = DenoiseConfig {
            h: 1e-3,
            ..Default::default()
        };
        let out = nl_means_denoise(&b, &cfg).unwrap();
        for (a, e) in out.data.iter().zip(&b.data) {
            assert!((a - e).abs() <= 1e-3 * e.abs().max(1.0));
        }
    }

    /// Direct evaluation of the weighted average, patch by patch.
    fn direct(b: &Band, cfg: &DenoiseConfig) -> Band {
        let (pr, sr) = ((cfg.patch / 2) as isize, (cfg.search / 2) as isize);
        let at = |x: isize, y: isize| b.data[reflect101(y, b.height) * b.width + reflect101(x, b.width)] as f64;
        Band::from_fn(b.width, b.height, |x, y| {
            let (x, y) = (x as isize, y as isize);
            let (mut a, mut s) = (0.0, 0.0);
            for dy in -sr..=sr {
                for dx in -sr..=sr {
                    let mut d = 0.0;
                    for py in -pr..=pr {
                        for px in -pr..=pr {
                            let e = at(x + px, y + py) - at(x + dx + px, y + dy + py);
                            d += e * e;
                        }
                    }
                    let wt = (-d / (cfg.h as f64).powi(2) / (cfg.patch * cfg.patch) as f64).exp();
                    a += wt * at(x + dx, y + dy);
                    s += wt;
                }
            }
            (a / s) as f32
        })
    }

    #[test]
    fn matches_direct_evaluation() {
        let b = Band::from_fn(14, 11, |x, y| ((x * 53 + y * 29) % 31) as f32 * 4.0);
        let cfg = DenoiseConfig {
            h: 25.0,
            patch: 3,
            search: 7,
        };
        let fast = nl_means_denoise(&b, &cfg).unwrap();
        let slow = direct(&b, &cfg);
        for (a, e) in fast.data.iter().zip(&slow.data) {
            assert!((a - e).abs() < 1e-2, "{a} vs {e}");
        }
    }
}
