//! Derived channels: NDVI, texture and Sobel magnitude.

use super::{reflect101, Band};
use crate::error::{Error, Result};

fn same_size(op: &'static str, a: &Band, b: &Band) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::invalid(
            op,
            format!("bands differ in size: {}x{} vs {}x{}", a.width, a.height, b.width, b.height),
        ));
    }
    Ok(())
}

/// `(nir − red) / (nir + red)`, with `0/0 → 0`.
pub fn ndvi(nir: &Band, red: &Band) -> Result<Band> {
    same_size("ndvi", nir, red)?;
    let data = nir
        .data
        .iter()
        .zip(&red.data)
        .map(|(&n, &r)| {
            let s = n + r;
            if s == 0.0 {
                0.0
            } else {
                ((n - r) / s).clamp(-1.0, 1.0)
            }
        })
        .collect();
    Ok(Band { width: nir.width, height: nir.height, data })
}

/// Rec. 601 luma `0.299 R + 0.587 G + 0.114 B`.
pub fn luminance(r: &Band, g: &Band, b: &Band) -> Result<Band> {
    same_size("luminance", r, g)?;
    same_size("luminance", r, b)?;
    let data = r
        .data
        .iter()
        .zip(&g.data)
        .zip(&b.data)
        .map(|((&r, &g), &b)| 0.299 * r + 0.587 * g + 0.114 * b)
        .collect();
    Ok(Band { width: r.width, height: r.height, data })
}

/// Normalised Gaussian taps for offsets `-radius..=radius`, radius `ceil(4σ)`.
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (4.0 * sigma).ceil().max(0.0) as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * (sigma as f64).powi(2))).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter().map(|t| (t / total) as f32).collect()
}

fn convolve_rows(band: &Band, k: &[f32]) -> Band {
    let r = (k.len() / 2) as isize;
    let w = band.width;
    let mut out = vec![0.0f32; band.data.len()];
    for y in 0..band.height {
        let row = &band.data[y * w..(y + 1) * w];
        for x in 0..w {
            let mut s = 0.0f32;
            for (j, &kj) in k.iter().enumerate() {
                s += kj * row[reflect101(x as isize + j as isize - r, w)];
            }
            out[y * w + x] = s;
        }
    }
    Band { width: w, height: band.height, data: out }
}

fn convolve_cols(band: &Band, k: &[f32]) -> Band {
    let r = (k.len() / 2) as isize;
    let (w, h) = (band.width, band.height);
    let mut out = vec![0.0f32; band.data.len()];
    for y in 0..h {
        for (j, &kj) in k.iter().enumerate() {
            let sy = reflect101(y as isize + j as isize - r, h);
            let src = &band.data[sy * w..(sy + 1) * w];
            for (o, &v) in out[y * w..(y + 1) * w].iter_mut().zip(src) {
                *o += kj * v;
            }
        }
    }
    Band { width: w, height: h, data: out }
}

/// Separable Gaussian blur with reflect-101 borders.
pub fn gaussian_blur(band: &Band, sigma: f32) -> Band {
    if band.data.is_empty() || sigma <= 0.0 {
        return band.clone();
    }
    let k = gaussian_kernel(sigma);
    convolve_cols(&convolve_rows(band, &k), &k)
}

/// High-pass residual `x − gaussian(x, σ)`.
pub fn texture(band: &Band, sigma: f32) -> Band {
    let low = gaussian_blur(band, sigma);
    let data = band.data.iter().zip(&low.data).map(|(&x, &l)| x - l).collect();
    Band { width: band.width, height: band.height, data }
}

/// Gradient magnitude of the 3×3 Sobel pair, reflect-101 borders.
pub fn sobel(band: &Band) -> Band {
    let (w, h) = (band.width, band.height);
    if w == 0 || h == 0 {
        return band.clone();
    }
    let at = |x: isize, y: isize| band.data[reflect101(y, h) * w + reflect101(x, w)];
    Band::from_fn(w, h, |x, y| {
        let (x, y) = (x as isize, y as isize);
        let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
            - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
        let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
            - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
        (gx * gx + gy * gy).sqrt()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ndvi_values() {
        let nir = Band::new(3, 1, vec![3000.0, 500.0, 0.0]).unwrap();
        let red = Band::new(3, 1, vec![1000.0, 500.0, 0.0]).unwrap();
        let v = ndvi(&nir, &red).unwrap();
        assert!((v.data[0] - 0.5).abs() < 1e-7);
        assert_eq!(v.data[1], 0.0);
        assert_eq!(v.data[2], 0.0);
    }

    #[test]
    fn ndvi_rejects_mismatched_bands() {
        assert!(ndvi(&Band::filled(2, 2, 1.0), &Band::filled(3, 2, 1.0)).is_err());
    }

    #[test]
    fn luminance_weights_sum_to_one() {
        let c = Band::filled(2, 2, 100.0);
        let l = luminance(&c, &c, &c).unwrap();
        for v in l.data {
            assert!((v - 100.0).abs() < 1e-4);
        }
    }

    #[test]
    fn kernel_radius_and_mass() {
        let k = gaussian_kernel(2.0);
        assert_eq!(k.len(), 17);
        assert!((k.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert_eq!(k[0], k[16]);
    }

    #[test]
    fn texture_of_constant_is_zero() {
        let t = texture(&Band::filled(30, 20, 42.0), 2.0);
        assert!(t.data.iter().all(|v| v.abs() < 1e-4));
    }

    #[test]
    fn texture_of_impulse() {
        let mut b = Band::filled(41, 41, 0.0);
        b.data[20 * 41 + 20] = 1.0;
        let t = texture(&b, 2.0);
        assert!(t.get(20, 20) > 0.0);
        assert!(t.get(22, 20) < 0.0 && t.get(20, 23) < 0.0);
        let total: f32 = t.data.iter().sum();
        assert!(total.abs() < 1e-3, "{total}");
    }

    /// 2-D convolution with the outer-product kernel, far from borders.
    #[test]
    fn blur_matches_direct_convolution_in_interior() {
        let b = Band::from_fn(40, 40, |x, y| ((x * 13 + y * 7) % 17) as f32);
        let k = gaussian_kernel(1.5);
        let r = (k.len() / 2) as isize;
        let fast = gaussian_blur(&b, 1.5);
        for y in r as usize..40 - r as usize {
            for x in r as usize..40 - r as usize {
                let mut s = 0.0f64;
                for j in -r..=r {
                    for i in -r..=r {
                        let v = b.get((x as isize + i) as usize, (y as isize + j) as usize) as f64;
                        s += (k[(i + r) as usize] * k[(j + r) as usize]) as f64 * v;
                    }
                }
                assert!((fast.get(x, y) as f64 - s).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn sobel_constant_and_step() {
        assert!(sobel(&Band::filled(8, 8, 5.0)).data.iter().all(|&v| v == 0.0));
        let step = Band::from_fn(10, 6, |x, _| if x >= 5 { 10.0 } else { 0.0 });
        let s = sobel(&step);
        for y in 0..6 {
            let row: Vec<f32> = (0..10).map(|x| s.get(x, y)).collect();
            assert_eq!(row[4], 40.0);
            assert_eq!(row[5], 40.0);
            assert!(row.iter().all(|&v| v <= 40.0));
            assert_eq!(row[2], 0.0);
            assert_eq!(row[7], 0.0);
        }
    }

    fn rot90(b: &Band) -> Band {
        // counter-clockwise: new(x, y) = old(w - 1 - y, x)
        Band::from_fn(b.height, b.width, |x, y| b.get(b.width - 1 - y, x))
    }

    proptest! {
        #[test]
        fn sobel_magnitude_commutes_with_rotation(
            w in 3usize..12, h in 3usize..12, seed in any::<u64>()
        ) {
            let b = Band::from_fn(w, h, |x, y| {
                let v = (x as u64 * 2654435761 + y as u64 * 40503 + seed) % 1000;
                v as f32 / 10.0
            });
            let a = rot90(&sobel(&b));
            let c = sobel(&rot90(&b));
            for (p, q) in a.data.iter().zip(&c.data) {
                prop_assert!((p - q).abs() <= 1e-5 * p.abs().max(1.0));
            }
        }

        #[test]
        fn ndvi_is_bounded(n in 0.0f32..5000.0, r in 0.0f32..5000.0) {
            let v = ndvi(&Band::filled(1, 1, n), &Band::filled(1, 1, r)).unwrap().data[0];
            prop_assert!((-1.0..=1.0).contains(&v));
        }
    }
}
