use super::conv::{self, ConvGeometry, Padding};
use super::param::{Gradients, ParamId, ParamStore};
use super::{conv_output_dim, Scalar, Shape, Tensor};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Variance guard of batch normalization.
pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the previous running statistic in the exponential average.
pub const BN_MOMENTUM: f64 = 0.9;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Running statistics slots of one batch-norm layer.
#[derive(Debug, Clone, Copy)]
pub struct BnState {
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    Upsample {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    AvgPool {
        x: Var,
        size: usize,
        stride: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Sigmoid {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Concat {
        xs: Vec<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    WeightedBce {
        logits: Var,
        target: Var,
        weight: Var,
    },
    Dice {
        logits: Var,
        target: Var,
    },
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward computation so that [`Tape::backward`] can replay it in
/// reverse. Parameters are borrowed from a [`ParamStore`]; their gradients
/// and any running-statistic updates are returned as [`Gradients`].
pub struct Tape<'p, T: Scalar = f32> {
    params: &'p ParamStore<T>,
    mode: Mode,
    rng: ChaCha8Rng,
    nodes: Vec<Node<T>>,
    running_stats: Vec<(ParamId, Vec<T>)>,
}

fn shape_err(op: &'static str, operand: &'static str, axis: &'static str, expected: usize, found: usize) -> Error {
    Error::Shape {
        op,
        operand,
        axis,
        expected,
        found,
    }
}

#[inline]
fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Interpolation taps for one output coordinate of a 2x bilinear upsample
/// (align-corners false, edge clamped).
#[inline]
fn upsample_taps(o: usize, len: usize) -> (usize, usize, f64, f64) {
    let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    let l1 = src - i0 as f64;
    (i0, i1, 1.0 - l1, l1)
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>, mode: Mode, seed: u64) -> Self {
        Tape {
            params,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            nodes: Vec::new(),
            running_stats: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records an input. With `requires_grad` its gradient is reported by
    /// [`Gradients::input`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let trainable = self.params.get(id).trainable;
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var> {
        let id = self.params.require(name)?;
        Ok(self.param(id))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.value(v).shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn conv_weight_dims(&self, op: &'static str, k: Var) -> Result<(usize, usize, usize, usize)> {
        let s = self.shape(k);
        if s.n == 0 || s.c == 0 || s.h == 0 || s.w == 0 {
            return Err(Error::contract(op, format!("empty kernel {s}")));
        }
        Ok((s.n, s.c, s.h, s.w))
    }

    fn check_bias(&self, op: &'static str, b: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = b {
            let len = self.value(b).len();
            if len != channels {
                return Err(shape_err(op, "bias", "C", channels, len));
            }
        }
        Ok(())
    }

    /// Convolution with symmetric padding. Kernel shape `(Cout, Cin, Kh, Kw)`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize, pad: usize, dilation: usize) -> Result<Var> {
        self.conv2d_padded(x, k, b, stride, Padding::same(pad), dilation)
    }

    /// Convolution with per-side padding.
    pub fn conv2d_padded(
        &mut self,
        x: Var,
        k: Var,
        b: Option<Var>,
        stride: usize,
        pad: Padding,
        dilation: usize,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        let xs = self.shape(x);
        let (cout, cin, kh, kw) = self.conv_weight_dims(OP, k)?;
        if xs.c != cin {
            return Err(shape_err(OP, "x", "C", cin, xs.c));
        }
        self.check_bias(OP, b, cout)?;
        let out_h = conv_output_dim(xs.h, pad.top, pad.bottom, kh, dilation, stride).ok_or_else(|| {
            Error::contract(
                OP,
                format!("effective kernel height {} exceeds padded input height {}", dilation * (kh.max(1) - 1) + 1, xs.h + pad.top + pad.bottom),
            )
        })?;
        let out_w = conv_output_dim(xs.w, pad.left, pad.right, kw, dilation, stride).ok_or_else(|| {
            Error::contract(
                OP,
                format!("effective kernel width {} exceeds padded input width {}", dilation * (kw.max(1) - 1) + 1, xs.w + pad.left + pad.right),
            )
        })?;
        let geom = ConvGeometry {
            kh,
            kw,
            stride,
            pad,
            dilation,
            in_h: xs.h,
            in_w: xs.w,
            out_h,
            out_w,
        };
        let shape = Shape::new(xs.n, cout, out_h, out_w);
        let mut out = Tensor::zeros(shape);
        conv::conv_forward(
            &geom,
            self.value(x).data(),
            xs.n,
            cin,
            self.value(k).data(),
            b.map(|b| self.value(b).data()),
            cout,
            out.data_mut(),
        );
        let needs = self.needs(x) || self.needs(k) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::Conv { x, k, b, geom }, needs))
    }

    /// Transposed convolution without padding. Kernel shape `(Cin, Cout, Kh, Kw)`;
    /// output extent `(H−1)·stride + Kh`.
    pub fn conv_transpose2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        const OP: &str = "transposed_conv2d";
        let xs = self.shape(x);
        let (cin, cout, kh, kw) = self.conv_weight_dims(OP, k)?;
        if xs.c != cin {
            return Err(shape_err(OP, "x", "C", cin, xs.c));
        }
        if stride == 0 || xs.h == 0 || xs.w == 0 {
            return Err(Error::contract(OP, "stride and input extent must be positive"));
        }
        self.check_bias(OP, b, cout)?;
        let out_h = (xs.h - 1) * stride + kh;
        let out_w = (xs.w - 1) * stride + kw;
        let geom = ConvGeometry {
            kh,
            kw,
            stride,
            pad: Padding::default(),
            dilation: 1,
            in_h: out_h,
            in_w: out_w,
            out_h: xs.h,
            out_w: xs.w,
        };
        let mut out = Tensor::zeros(Shape::new(xs.n, cout, out_h, out_w));
        conv::conv_transpose_forward(
            &geom,
            self.value(x).data(),
            xs.n,
            cin,
            self.value(k).data(),
            b.map(|b| self.value(b).data()),
            cout,
            out.data_mut(),
        );
        let needs = self.needs(x) || self.needs(k) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::ConvTranspose { x, k, b, geom }, needs))
    }

    /// Parameter-free 2x bilinear upsampling, align-corners false.
    pub fn upsample_bilinear2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.h == 0 || s.w == 0 {
            return Err(Error::contract("bilinear_upsample2x", format!("empty input {s}")));
        }
        let (oh, ow) = (2 * s.h, 2 * s.w);
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
        let xt: Vec<_> = (0..ow).map(|o| upsample_taps(o, s.w)).collect();
        let yt: Vec<_> = (0..oh).map(|o| upsample_taps(o, s.h)).collect();
        let src = self.value(x).data();
        let mut rows = vec![T::zero(); s.h * ow];
        for (plane_in, plane_out) in src.chunks_exact(s.plane()).zip(out.data_mut().chunks_exact_mut(oh * ow)) {
            for y in 0..s.h {
                let r = &plane_in[y * s.w..(y + 1) * s.w];
                for (ox, &(i0, i1, l0, l1)) in xt.iter().enumerate() {
                    rows[y * ow + ox] = r[i0] * T::of(l0) + r[i1] * T::of(l1);
                }
            }
            for (oy, &(i0, i1, l0, l1)) in yt.iter().enumerate() {
                let (l0, l1) = (T::of(l0), T::of(l1));
                for ox in 0..ow {
                    plane_out[oy * ow + ox] = rows[i0 * ow + ox] * l0 + rows[i1 * ow + ox] * l1;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::Upsample { x }, needs))
    }

    /// Max or average pooling with a `size×size` window.
    pub fn pool2d(&mut self, x: Var, kind: PoolKind, size: usize, stride: usize) -> Result<Var> {
        const OP: &str = "pool2d";
        let s = self.shape(x);
        if size == 0 || stride == 0 {
            return Err(Error::contract(OP, "size and stride must be positive"));
        }
        if !s.h.is_multiple_of(stride) {
            return Err(shape_err(OP, "x", "H (divisible by stride)", s.h.next_multiple_of(stride), s.h));
        }
        if !s.w.is_multiple_of(stride) {
            return Err(shape_err(OP, "x", "W (divisible by stride)", s.w.next_multiple_of(stride), s.w));
        }
        if size > s.h || size > s.w {
            return Err(Error::contract(OP, format!("window {size} larger than input {s}")));
        }
        let oh = (s.h - size) / stride + 1;
        let ow = (s.w - size) / stride + 1;
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
        let src = self.value(x).data();
        let needs = self.needs(x);
        match kind {
            PoolKind::Max => {
                let mut argmax = vec![0u32; out.len()];
                for (p, (plane_in, plane_out)) in src.chunks_exact(s.plane()).zip(out.data_mut().chunks_exact_mut(oh * ow)).enumerate() {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = T::neg_infinity();
                            let mut best_idx = 0usize;
                            for dy in 0..size {
                                for dx in 0..size {
                                    let idx = (oy * stride + dy) * s.w + ox * stride + dx;
                                    // strict `>` keeps the first index in scan order on ties
                                    if plane_in[idx] > best || (dy == 0 && dx == 0) {
                                        best = plane_in[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            plane_out[oy * ow + ox] = best;
                            argmax[p * oh * ow + oy * ow + ox] = best_idx as u32;
                        }
                    }
                }
                Ok(self.push(out, Op::MaxPool { x, argmax }, needs))
            }
            PoolKind::Avg => {
                let inv = T::of(1.0 / (size * size) as f64);
                for (plane_in, plane_out) in src.chunks_exact(s.plane()).zip(out.data_mut().chunks_exact_mut(oh * ow)) {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = T::zero();
                            for dy in 0..size {
                                for dx in 0..size {
                                    acc = acc + plane_in[(oy * stride + dy) * s.w + ox * stride + dx];
                                }
                            }
                            plane_out[oy * ow + ox] = acc * inv;
                        }
                    }
                }
                Ok(self.push(out, Op::AvgPool { x, size, stride }, needs))
            }
        }
    }

    /// Batch normalization. Training mode normalizes with the batch
    /// statistics per channel over `(n, h, w)` and records updated running
    /// statistics; inference mode uses the stored running statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, state: BnState) -> Result<Var> {
        const OP: &str = "batch_norm";
        let s = self.shape(x);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let len = self.value(v).len();
            if len != s.c {
                return Err(shape_err(OP, name, "C", s.c, len));
            }
        }
        let count = s.n * s.plane();
        let xd = self.value(x).data();
        let mut pending = Vec::new();
        let (mean, inv_std, batch_stats) = match self.mode {
            Mode::Train if count > 0 => {
                let mut mean = vec![T::zero(); s.c];
                let mut var = vec![T::zero(); s.c];
                for c in 0..s.c {
                    let mut acc = 0.0f64;
                    for n in 0..s.n {
                        let off = (n * s.c + c) * s.plane();
                        acc += xd[off..off + s.plane()].iter().map(|v| v.f64()).sum::<f64>();
                    }
                    let m = acc / count as f64;
                    let mut sq = 0.0f64;
                    for n in 0..s.n {
                        let off = (n * s.c + c) * s.plane();
                        sq += xd[off..off + s.plane()].iter().map(|v| (v.f64() - m).powi(2)).sum::<f64>();
                    }
                    mean[c] = T::of(m);
                    var[c] = T::of(sq / count as f64);
                }
                let rm = self.params.value(state.running_mean).data();
                let rv = self.params.value(state.running_var).data();
                let mo = T::of(BN_MOMENTUM);
                let one_m = T::of(1.0 - BN_MOMENTUM);
                let new_mean: Vec<T> = rm.iter().zip(&mean).map(|(&r, &b)| mo * r + one_m * b).collect();
                let new_var: Vec<T> = rv.iter().zip(&var).map(|(&r, &b)| mo * r + one_m * b).collect();
                pending.push((state.running_mean, new_mean));
                pending.push((state.running_var, new_var));
                let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(BN_EPSILON)).sqrt()).collect();
                (mean, inv, true)
            }
            _ => {
                let mean = self.params.value(state.running_mean).data().to_vec();
                let inv = self
                    .params
                    .value(state.running_var)
                    .data()
                    .iter()
                    .map(|&v| T::one() / (v + T::of(BN_EPSILON)).sqrt())
                    .collect();
                (mean, inv, false)
            }
        };
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = Tensor::zeros(s);
        for (i, (dst, src)) in out.data_mut().chunks_exact_mut(s.plane()).zip(xd.chunks_exact(s.plane())).enumerate() {
            let c = i % s.c;
            let scale = g[c] * inv_std[c];
            let shift = bt[c] - mean[c] * scale;
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v * scale + shift;
            }
        }
        self.running_stats.extend(pending);
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
            needs,
        ))
    }

    /// `y = x` for `x > 0`, else `slope·x`. Slope 0 is plain ReLU; `x == 0`
    /// takes the negative branch in the backward pass.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(slope >= 0.0) {
            return Err(Error::contract("leaky_relu", format!("slope must be >= 0, got {slope}")));
        }
        let slope = T::of(slope);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        let needs = self.needs(x);
        Ok(self.push(out, Op::LeakyRelu { x, slope }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let needs = self.needs(x);
        self.push(out, Op::Sigmoid { x }, needs)
    }

    /// Inverted dropout in training mode, identity otherwise.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::contract("dropout", format!("rate must lie in [0, 1), got {rate}")));
        }
        if self.mode == Mode::Infer || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if self.rng.random::<f64>() >= rate { keep } else { T::zero() })
            .collect();
        let mut out = self.value(x).clone();
        for (v, &m) in out.data_mut().iter_mut().zip(&mask) {
            *v = *v * m;
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::Dropout { x, mask }, needs))
    }

    /// Stacks tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let first = self.shape(*xs.first().ok_or_else(|| Error::contract(OP, "no operands"))?);
        let mut c = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.n != first.n {
                return Err(shape_err(OP, "xs", "N", first.n, s.n));
            }
            if s.h != first.h {
                return Err(shape_err(OP, "xs", "H", first.h, s.h));
            }
            if s.w != first.w {
                return Err(shape_err(OP, "xs", "W", first.w, s.w));
            }
            c += s.c;
        }
        let shape = Shape::new(first.n, c, first.h, first.w);
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..first.n {
            for &v in xs {
                data.extend_from_slice(self.value(v).sample(n));
            }
        }
        let out = Tensor::from_vec(shape, data)?;
        let needs = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(out, Op::Concat { xs: xs.to_vec() }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            for (axis, ea, eb) in [("N", sa.n, sb.n), ("C", sa.c, sb.c), ("H", sa.h, sb.h), ("W", sa.w, sb.w)] {
                if ea != eb {
                    return Err(shape_err("add", "y", axis, ea, eb));
                }
            }
        }
        let mut out = self.value(a).clone();
        add_into(out.data_mut(), self.value(b).data());
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    /// Sum of all elements as a scalar tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.f64()).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(T::of(s)), Op::Sum { x }, needs)
    }

    fn check_same(&self, op: &'static str, a: Var, name: &'static str, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() {
            return Err(shape_err(op, name, "len", sa.len(), sb.len()));
        }
        if sa.n != sb.n {
            return Err(shape_err(op, name, "N", sa.n, sb.n));
        }
        Ok(())
    }

    /// Pixel-mean of `−w·(y·log σ(z) + (1−y)·log(1−σ(z)))` in the stable
    /// `max(z,0) − z·y + log(1+e^−|z|)` form.
    pub fn weighted_bce(&mut self, logits: Var, target: Var, weight: Var) -> Result<Var> {
        self.check_same("weighted_bce", logits, "target", target)?;
        self.check_same("weighted_bce", logits, "weight", weight)?;
        let v = super::super::metrics::loss::weighted_bce_value(
            self.value(logits).data(),
            self.value(target).data(),
            self.value(weight).data(),
        );
        let needs = self.needs(logits);
        Ok(self.push(Tensor::scalar(T::of(v)), Op::WeightedBce { logits, target, weight }, needs))
    }

    /// Smoothed Dice loss per sample, averaged over the batch.
    pub fn dice(&mut self, logits: Var, target: Var) -> Result<Var> {
        self.check_same("dice_loss", logits, "target", target)?;
        let n = self.shape(logits).n;
        let v = super::super::metrics::loss::dice_value(self.value(logits).data(), self.value(target).data(), n);
        let needs = self.needs(logits);
        Ok(self.push(Tensor::scalar(T::of(v)), Op::Dice { logits, target }, needs))
    }

    /// Ends a forward-only pass, keeping the running-statistic updates.
    pub fn finish(self) -> Gradients<T> {
        Gradients {
            params: vec![None; self.params.len()],
            running_stats: self.running_stats,
            leaves: Vec::new(),
        }
    }

    /// Reverse pass from a scalar head.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls.len() != 1 {
            return Err(Error::contract("backward", format!("loss head must be scalar, got shape {ls}")));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<Vec<T>>> = vec![None; self.params.len()];
        let mut leaves = Vec::new();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_node(i, g, &mut grads, &mut param_grads, &mut leaves);
        }
        Ok(Gradients {
            params: param_grads,
            running_stats: self.running_stats,
            leaves,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => add_into(existing, &delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn zeros_like(&self, v: Var) -> Option<Vec<T>> {
        self.needs(v).then(|| vec![T::zero(); self.value(v).len()])
    }

    fn backward_node(
        &self,
        i: usize,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        param_grads: &mut [Option<Vec<T>>],
        leaves: &mut Vec<(usize, Vec<T>)>,
    ) {
        match &self.nodes[i].op {
            Op::Leaf => leaves.push((i, g)),
            Op::Param(id) => match &mut param_grads[id.0] {
                Some(existing) => add_into(existing, &g),
                slot @ None => *slot = Some(g),
            },
            Op::Conv { x, k, b, geom } => {
                let xs = self.shape(*x);
                let ks = self.shape(*k);
                let mut dx = self.zeros_like(*x);
                let mut dk = self.zeros_like(*k);
                let mut db = b.and_then(|b| self.zeros_like(b));
                conv::conv_backward(
                    geom,
                    self.value(*x).data(),
                    xs.n,
                    xs.c,
                    self.value(*k).data(),
                    ks.n,
                    &g,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(d) = dx {
                    self.accumulate(grads, *x, d);
                }
                if let Some(d) = dk {
                    self.accumulate(grads, *k, d);
                }
                if let (Some(b), Some(d)) = (b, db) {
                    self.accumulate(grads, *b, d);
                }
            }
            Op::ConvTranspose { x, k, b, geom } => {
                let xs = self.shape(*x);
                let ks = self.shape(*k);
                let mut dx = self.zeros_like(*x);
                let mut dk = self.zeros_like(*k);
                let mut db = b.and_then(|b| self.zeros_like(b));
                conv::conv_transpose_backward(
                    geom,
                    self.value(*x).data(),
                    xs.n,
                    xs.c,
                    self.value(*k).data(),
                    ks.c,
                    &g,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(d) = dx {
                    self.accumulate(grads, *x, d);
                }
                if let Some(d) = dk {
                    self.accumulate(grads, *k, d);
                }
                if let (Some(b), Some(d)) = (b, db) {
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Upsample { x } => {
                let s = self.shape(*x);
                let (oh, ow) = (2 * s.h, 2 * s.w);
                let xt: Vec<_> = (0..ow).map(|o| upsample_taps(o, s.w)).collect();
                let yt: Vec<_> = (0..oh).map(|o| upsample_taps(o, s.h)).collect();
                let mut dx = vec![T::zero(); s.len()];
                let mut rows = vec![T::zero(); s.h * ow];
                for (gout, gin) in g.chunks_exact(oh * ow).zip(dx.chunks_exact_mut(s.plane())) {
                    rows.fill(T::zero());
                    for (oy, &(i0, i1, l0, l1)) in yt.iter().enumerate() {
                        let (l0, l1) = (T::of(l0), T::of(l1));
                        for ox in 0..ow {
                            let v = gout[oy * ow + ox];
                            rows[i0 * ow + ox] = rows[i0 * ow + ox] + v * l0;
                            rows[i1 * ow + ox] = rows[i1 * ow + ox] + v * l1;
                        }
                    }
                    for y in 0..s.h {
                        for (ox, &(i0, i1, l0, l1)) in xt.iter().enumerate() {
                            let v = rows[y * ow + ox];
                            gin[y * s.w + i0] = gin[y * s.w + i0] + v * T::of(l0);
                            gin[y * s.w + i1] = gin[y * s.w + i1] + v * T::of(l1);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MaxPool { x, argmax } => {
                let s = self.shape(*x);
                let out_plane = g.len() / (s.n * s.c).max(1);
                let mut dx = vec![T::zero(); s.len()];
                for (idx, (&gv, &am)) in g.iter().zip(argmax).enumerate() {
                    let plane = idx / out_plane;
                    let t = plane * s.plane() + am as usize;
                    dx[t] = dx[t] + gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::AvgPool { x, size, stride } => {
                let s = self.shape(*x);
                let oh = (s.h - size) / stride + 1;
                let ow = (s.w - size) / stride + 1;
                let inv = T::of(1.0 / (size * size) as f64);
                let mut dx = vec![T::zero(); s.len()];
                for (gout, gin) in g.chunks_exact(oh * ow).zip(dx.chunks_exact_mut(s.plane())) {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let v = gout[oy * ow + ox] * inv;
                            for dy in 0..*size {
                                for dxx in 0..*size {
                                    let t = (oy * stride + dy) * s.w + ox * stride + dxx;
                                    gin[t] = gin[t] + v;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let s = self.shape(*x);
                let xd = self.value(*x).data();
                let gm = self.value(*gamma).data();
                let count = (s.n * s.plane()) as f64;
                let mut dgamma = vec![0.0f64; s.c];
                let mut dbeta = vec![0.0f64; s.c];
                for (p, (gp, xp)) in g.chunks_exact(s.plane()).zip(xd.chunks_exact(s.plane())).enumerate() {
                    let c = p % s.c;
                    let (m, inv) = (mean[c].f64(), inv_std[c].f64());
                    for (&gv, &xv) in gp.iter().zip(xp) {
                        let gv = gv.f64();
                        dgamma[c] += gv * (xv.f64() - m) * inv;
                        dbeta[c] += gv;
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); s.len()];
                    for (p, ((dp, gp), xp)) in dx
                        .chunks_exact_mut(s.plane())
                        .zip(g.chunks_exact(s.plane()))
                        .zip(xd.chunks_exact(s.plane()))
                        .enumerate()
                    {
                        let c = p % s.c;
                        let (m, inv, gam) = (mean[c].f64(), inv_std[c].f64(), gm[c].f64());
                        if *batch_stats {
                            let k = gam * inv / count;
                            for ((d, &gv), &xv) in dp.iter_mut().zip(gp).zip(xp) {
                                let xhat = (xv.f64() - m) * inv;
                                *d = T::of(k * (count * gv.f64() - dbeta[c] - xhat * dgamma[c]));
                            }
                        } else {
                            let k = T::of(gam * inv);
                            for (d, &gv) in dp.iter_mut().zip(gp) {
                                *d = gv * k;
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, dgamma.into_iter().map(T::of).collect());
                self.accumulate(grads, *beta, dbeta.into_iter().map(T::of).collect());
            }
            Op::LeakyRelu { x, slope } => {
                let xd = self.value(*x).data();
                let dx = g.iter().zip(xd).map(|(&gv, &xv)| if xv > T::zero() { gv } else { gv * *slope }).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let y = match &self.nodes[i].value {
                    Value::Owned(t) => t.data(),
                    Value::Param(_) => unreachable!(),
                };
                let dx = g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (T::one() - yv)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Dropout { x, mask } => {
                let dx = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { xs } => {
                let out = self.shape(Var(i));
                let mut offset_c = 0;
                for &v in xs {
                    let s = self.shape(v);
                    if self.needs(v) {
                        let mut dx = Vec::with_capacity(s.len());
                        for n in 0..out.n {
                            let start = (n * out.c + offset_c) * out.plane();
                            dx.extend_from_slice(&g[start..start + s.sample()]);
                        }
                        self.accumulate(grads, v, dx);
                    }
                    offset_c += s.c;
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) && self.needs(*b) {
                    self.accumulate(grads, *a, g.clone());
                    self.accumulate(grads, *b, g);
                } else if self.needs(*a) {
                    self.accumulate(grads, *a, g);
                } else {
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Sum { x } => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::WeightedBce { logits, target, weight } => {
                let z = self.value(*logits).data();
                let y = self.value(*target).data();
                let w = self.value(*weight).data();
                let scale = g[0].f64() / z.len().max(1) as f64;
                let dz = z
                    .iter()
                    .zip(y)
                    .zip(w)
                    .map(|((&zv, &yv), &wv)| T::of(scale * wv.f64() * (sigmoid(zv.f64()) - yv.f64())))
                    .collect();
                self.accumulate(grads, *logits, dz);
            }
            Op::Dice { logits, target } => {
                let z = self.value(*logits).data();
                let y = self.value(*target).data();
                let n = self.shape(*logits).n.max(1);
                let per = z.len() / n;
                let mut dz = Vec::with_capacity(z.len());
                for (zs, ys) in z.chunks_exact(per).zip(y.chunks_exact(per)) {
                    let mut inter = 0.0f64;
                    let mut total = 0.0f64;
                    for (&zv, &yv) in zs.iter().zip(ys) {
                        let p = sigmoid(zv.f64());
                        inter += yv.f64() * p;
                        total += yv.f64() + p;
                    }
                    let denom = total + 1.0;
                    let numer = 2.0 * inter + 1.0;
                    let scale = g[0].f64() / n as f64;
                    for (&zv, &yv) in zs.iter().zip(ys) {
                        let p = sigmoid(zv.f64());
                        let dd_dp = -(2.0 * yv.f64() * denom - numer) / (denom * denom);
                        dz.push(T::of(scale * dd_dp * p * (1.0 - p)));
                    }
                }
                self.accumulate(grads, *logits, dz);
            }
        }
    }
}
