//! im2col convolution kernels shared by the forward and transposed passes.

use super::{gemm, Scalar};

/// Zero padding per side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct Padding {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Padding {
    pub const fn same(p: usize) -> Self {
        Padding {
            top: p,
            left: p,
            bottom: p,
            right: p,
        }
    }
}

/// Everything needed to map an input plane onto an output plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: Padding,
    pub dilation: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// `floor((in + pad_lo + pad_hi − dilation·(k−1) − 1) / stride) + 1`, or
/// `None` when the dilated kernel does not fit in the padded input.
pub fn conv_output_dim(
    input: usize,
    pad_lo: usize,
    pad_hi: usize,
    kernel: usize,
    dilation: usize,
    stride: usize,
) -> Option<usize> {
    if kernel == 0 || dilation == 0 || stride == 0 {
        return None;
    }
    let effective = dilation * (kernel - 1) + 1;
    let padded = input + pad_lo + pad_hi;
    if effective > padded {
        return None;
    }
    Some((padded - effective) / stride + 1)
}

impl ConvGeometry {
    pub fn patch_len(&self, channels: usize) -> usize {
        channels * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_plane(&self) -> usize {
        self.in_h * self.in_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.stride == 1
            && self.pad == Padding::default()
            && self.in_h == self.out_h
            && self.in_w == self.out_w
    }

    /// Valid output range `[lo, hi)` along one axis for a given tap offset.
    #[inline]
    fn valid_range(offset: isize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let s = stride as isize;
        // smallest o with o*s + offset >= 0
        let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
        // largest o with o*s + offset <= in_len - 1
        let last = in_len as isize - 1 - offset;
        let hi = if last < 0 { 0 } else { last / s + 1 };
        let lo = lo.clamp(0, out_len as isize) as usize;
        let hi = hi.clamp(0, out_len as isize) as usize;
        (lo, hi.max(lo))
    }

    /// Unfolds one `channels×in_h×in_w` image into a `(channels·kh·kw) × out_plane` matrix.
    pub(crate) fn im2col<T: Scalar>(&self, img: &[T], channels: usize, col: &mut [T]) {
        let p = self.out_plane();
        debug_assert_eq!(col.len(), self.patch_len(channels) * p);
        for c in 0..channels {
            let plane = &img[c * self.in_plane()..(c + 1) * self.in_plane()];
            for ky in 0..self.kh {
                let off_y = (ky * self.dilation) as isize - self.pad.top as isize;
                let (y_lo, y_hi) = Self::valid_range(off_y, self.stride, self.in_h, self.out_h);
                for kx in 0..self.kw {
                    let off_x = (kx * self.dilation) as isize - self.pad.left as isize;
                    let (x_lo, x_hi) = Self::valid_range(off_x, self.stride, self.in_w, self.out_w);
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * p..(row + 1) * p];
                    dst[..y_lo * self.out_w].fill(T::zero());
                    dst[y_hi * self.out_w..].fill(T::zero());
                    for oy in y_lo..y_hi {
                        let iy = (oy as isize * self.stride as isize + off_y) as usize;
                        let src = &plane[iy * self.in_w..(iy + 1) * self.in_w];
                        let out = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        out[..x_lo].fill(T::zero());
                        out[x_hi..].fill(T::zero());
                        if self.stride == 1 && x_lo < x_hi {
                            let start = (x_lo as isize + off_x) as usize;
                            out[x_lo..x_hi].copy_from_slice(&src[start..start + (x_hi - x_lo)]);
                        } else {
                            for ox in x_lo..x_hi {
                                out[ox] = src[(ox as isize * self.stride as isize + off_x) as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters (adds) columns back into an image.
    pub(crate) fn col2im<T: Scalar>(&self, col: &[T], channels: usize, img: &mut [T]) {
        let p = self.out_plane();
        for c in 0..channels {
            let plane = &mut img[c * self.in_plane()..(c + 1) * self.in_plane()];
            for ky in 0..self.kh {
                let off_y = (ky * self.dilation) as isize - self.pad.top as isize;
                let (y_lo, y_hi) = Self::valid_range(off_y, self.stride, self.in_h, self.out_h);
                for kx in 0..self.kw {
                    let off_x = (kx * self.dilation) as isize - self.pad.left as isize;
                    let (x_lo, x_hi) = Self::valid_range(off_x, self.stride, self.in_w, self.out_w);
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &col[row * p..(row + 1) * p];
                    for oy in y_lo..y_hi {
                        let iy = (oy as isize * self.stride as isize + off_y) as usize;
                        let dst = &mut plane[iy * self.in_w..(iy + 1) * self.in_w];
                        let s = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        if self.stride == 1 && x_lo < x_hi {
                            let start = (x_lo as isize + off_x) as usize;
                            for (d, &v) in dst[start..start + (x_hi - x_lo)]
                                .iter_mut()
                                .zip(&s[x_lo..x_hi])
                            {
                                *d = *d + v;
                            }
                        } else {
                            for ox in x_lo..x_hi {
                                let ix = (ox as isize * self.stride as isize + off_x) as usize;
                                dst[ix] = dst[ix] + s[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scratch buffer reused across the images of a batch.
pub(crate) struct ColBuffer<T> {
    buf: Vec<T>,
}

impl<T: Scalar> ColBuffer<T> {
    pub(crate) fn new() -> Self {
        ColBuffer { buf: Vec::new() }
    }

    fn get(&mut self, len: usize) -> &mut [T] {
        if self.buf.len() < len {
            self.buf.resize(len, T::zero());
        }
        &mut self.buf[..len]
    }
}

/// Forward convolution of a batch. `weight` is `cout × (cin·kh·kw)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_forward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    batch: usize,
    cin: usize,
    weight: &[T],
    bias: Option<&[T]>,
    cout: usize,
    out: &mut [T],
) {
    let k = g.patch_len(cin);
    let p = g.out_plane();
    let mut scratch = ColBuffer::new();
    for n in 0..batch {
        let img = &input[n * cin * g.in_plane()..(n + 1) * cin * g.in_plane()];
        let dst = &mut out[n * cout * p..(n + 1) * cout * p];
        if g.is_pointwise() {
            gemm(cout, k, p, weight, false, img, false, dst, false);
        } else {
            let col = scratch.get(k * p);
            g.im2col(img, cin, col);
            gemm(cout, k, p, weight, false, col, false, dst, false);
        }
        if let Some(b) = bias {
            for (co, plane) in dst.chunks_exact_mut(p).enumerate() {
                let bv = b[co];
                plane.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
}

/// Backward convolution. Accumulates into the provided gradient buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    batch: usize,
    cin: usize,
    weight: &[T],
    cout: usize,
    grad_out: &[T],
    grad_input: Option<&mut [T]>,
    grad_weight: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) {
    let k = g.patch_len(cin);
    let p = g.out_plane();
    let in_len = cin * g.in_plane();
    let mut scratch = ColBuffer::new();
    let mut dcol_scratch = ColBuffer::new();
    let mut grad_input = grad_input;
    let mut grad_weight = grad_weight;
    if let Some(db) = grad_bias {
        for n in 0..batch {
            let dy = &grad_out[n * cout * p..(n + 1) * cout * p];
            for (co, plane) in dy.chunks_exact(p).enumerate() {
                let s: f64 = plane.iter().map(|v| v.f64()).sum();
                db[co] = db[co] + T::of(s);
            }
        }
    }
    for n in 0..batch {
        let img = &input[n * in_len..(n + 1) * in_len];
        let dy = &grad_out[n * cout * p..(n + 1) * cout * p];
        if let Some(dw) = grad_weight.as_deref_mut() {
            if g.is_pointwise() {
                gemm(cout, p, k, dy, false, img, true, dw, true);
            } else {
                let col = scratch.get(k * p);
                g.im2col(img, cin, col);
                gemm(cout, p, k, dy, false, col, true, dw, true);
            }
        }
        if let Some(dx) = grad_input.as_deref_mut() {
            let dx = &mut dx[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                gemm(k, cout, p, weight, true, dy, false, dx, true);
            } else {
                let dcol = dcol_scratch.get(k * p);
                gemm(k, cout, p, weight, true, dy, false, dcol, false);
                g.col2im(dcol, cin, dx);
            }
        }
    }
}

/// Transposed convolution expressed through the geometry of the forward
/// convolution it is the adjoint of: `geom` maps the (large) output plane
/// onto the (small) input plane. `weight` is `cin × (cout·kh·kw)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose_forward<T: Scalar>(
    geom: &ConvGeometry,
    input: &[T],
    batch: usize,
    cin: usize,
    weight: &[T],
    bias: Option<&[T]>,
    cout: usize,
    out: &mut [T],
) {
    let k = geom.patch_len(cout);
    let small = geom.out_plane();
    let large = geom.in_plane();
    let mut scratch = ColBuffer::new();
    for n in 0..batch {
        let x = &input[n * cin * small..(n + 1) * cin * small];
        let dst = &mut out[n * cout * large..(n + 1) * cout * large];
        dst.fill(T::zero());
        let col = scratch.get(k * small);
        gemm(k, cin, small, weight, true, x, false, col, false);
        geom.col2im(col, cout, dst);
        if let Some(b) = bias {
            for (co, plane) in dst.chunks_exact_mut(large).enumerate() {
                let bv = b[co];
                plane.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose_backward<T: Scalar>(
    geom: &ConvGeometry,
    input: &[T],
    batch: usize,
    cin: usize,
    weight: &[T],
    cout: usize,
    grad_out: &[T],
    grad_input: Option<&mut [T]>,
    grad_weight: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) {
    let k = geom.patch_len(cout);
    let small = geom.out_plane();
    let large = geom.in_plane();
    let mut scratch = ColBuffer::new();
    let mut grad_input = grad_input;
    let mut grad_weight = grad_weight;
    if let Some(db) = grad_bias {
        for n in 0..batch {
            let dy = &grad_out[n * cout * large..(n + 1) * cout * large];
            for (co, plane) in dy.chunks_exact(large).enumerate() {
                let s: f64 = plane.iter().map(|v| v.f64()).sum();
                db[co] = db[co] + T::of(s);
            }
        }
    }
    for n in 0..batch {
        let x = &input[n * cin * small..(n + 1) * cin * small];
        let dy = &grad_out[n * cout * large..(n + 1) * cout * large];
        let col = scratch.get(k * small);
        geom.im2col(dy, cout, col);
        if let Some(dx) = grad_input.as_deref_mut() {
            let dx = &mut dx[n * cin * small..(n + 1) * cin * small];
            gemm(cin, k, small, weight, false, col, false, dx, true);
        }
        if let Some(dw) = grad_weight.as_deref_mut() {
            gemm(cin, small, k, x, false, col, true, dw, true);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_dim_closed_form() {
        assert_eq!(conv_output_dim(64, 1, 1, 3, 1, 1), Some(64));
        assert_eq!(conv_output_dim(5, 0, 0, 3, 2, 1), Some(1));
        assert_eq!(conv_output_dim(4, 0, 0, 3, 2, 1), None);
        assert_eq!(conv_output_dim(64, 1, 1, 3, 1, 2), Some(32));
    }

    #[test]
    fn im2col_then_col2im_counts_taps() {
        // col2im(im2col(ones)) counts, for each input pixel, how many output
        // windows cover it.
        let g = ConvGeometry {
            kh: 3,
            kw: 3,
            stride: 1,
            pad: Padding::same(1),
            dilation: 1,
            in_h: 4,
            in_w: 4,
            out_h: 4,
            out_w: 4,
        };
        let img = vec![1.0f64; 16];
        let mut col = vec![0.0; 9 * 16];
        g.im2col(&img, 1, &mut col);
        let mut back = vec![0.0; 16];
        g.col2im(&col, 1, &mut back);
        assert_eq!(back[0], 4.0);
        assert_eq!(back[1], 6.0);
        assert_eq!(back[5], 9.0);
    }
}
