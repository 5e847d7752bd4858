//! Grey and binary morphology with a 3×3 square element.

use super::Band;
use crate::raster::Mask;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MorphOp {
    Erode,
    Dilate,
    /// Erosion followed by dilation.
    Open,
    /// Dilation followed by erosion.
    Close,
}

/// One 3×3 min or max pass. Neighbours outside the image are ignored.
fn pass<T: Copy + PartialOrd>(src: &[T], w: usize, h: usize, take_max: bool) -> Vec<T> {
    let mut out = src.to_vec();
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let mut best = src[y * w + x];
            for yy in y0..=y1 {
                for &v in &src[yy * w + x0..=yy * w + x1] {
                    if (take_max && v > best) || (!take_max && v < best) {
                        best = v;
                    }
                }
            }
            out[y * w + x] = best;
        }
    }
    out
}

fn apply<T: Copy + PartialOrd>(data: &[T], w: usize, h: usize, op: MorphOp, radius: usize) -> Vec<T> {
    if w == 0 || h == 0 {
        return data.to_vec();
    }
    let run = |mut v: Vec<T>, take_max: bool| {
        for _ in 0..radius {
            v = pass(&v, w, h, take_max);
        }
        v
    };
    match op {
        MorphOp::Erode => run(data.to_vec(), false),
        MorphOp::Dilate => run(data.to_vec(), true),
        MorphOp::Open => run(run(data.to_vec(), false), true),
        MorphOp::Close => run(run(data.to_vec(), true), false),
    }
}

/// Binary morphology on a mask; `radius` repeats the 3×3 step.
pub fn morph(mask: &Mask, op: MorphOp, radius: usize) -> Mask {
    Mask {
        width: mask.width,
        height: mask.height,
        data: apply(&mask.data, mask.width, mask.height, op, radius),
    }
}

/// Grey-level morphology on a band.
pub fn morph_band(band: &Band, op: MorphOp, radius: usize) -> Band {
    Band {
        width: band.width,
        height: band.height,
        data: apply(&band.data, band.width, band.height, op, radius),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn open_removes_isolated_pixel() {
        let mut m = Mask::zeros(9, 9);
        m.set(4, 4, true);
        assert_eq!(morph(&m, MorphOp::Open, 1).count(), 0);
    }

    #[test]
    fn open_keeps_solid_square() {
        let m = Mask::from_fn(20, 20, |x, y| (5..15).contains(&x) && (5..15).contains(&y));
        assert_eq!(morph(&m, MorphOp::Open, 1), m);
        let e = morph(&m, MorphOp::Erode, 1);
        assert_eq!(e.count(), 64);
    }

    #[test]
    fn close_fills_pinhole() {
        let mut m = Mask::from_fn(9, 9, |_, _| true);
        m.set(4, 4, false);
        assert_eq!(morph(&m, MorphOp::Close, 1).count(), 81);
    }

    #[test]
    fn border_neighbours_are_ignored() {
        let m = Mask::from_fn(5, 5, |_, _| true);
        assert_eq!(morph(&m, MorphOp::Erode, 1).count(), 25);
        let b = Band::from_fn(3, 1, |x, _| x as f32);
        assert_eq!(morph_band(&b, MorphOp::Dilate, 1).data, vec![1.0, 2.0, 2.0]);
        assert_eq!(morph_band(&b, MorphOp::Erode, 1).data, vec![0.0, 0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn open_and_close_are_idempotent(
            w in 1usize..14, h in 1usize..14, bits in proptest::collection::vec(any::<bool>(), 196),
            radius in 1usize..3
        ) {
            let m = Mask::from_fn(w, h, |x, y| bits[y * 14 + x]);
            let o = morph(&m, MorphOp::Open, radius);
            prop_assert_eq!(morph(&o, MorphOp::Open, radius), o.clone());
            let c = morph(&m, MorphOp::Close, radius);
            prop_assert_eq!(morph(&c, MorphOp::Close, radius), c);
            // open is anti-extensive
            for (a, b) in o.data.iter().zip(&m.data) {
                prop_assert!(a <= b);
            }
        }
    }
}
