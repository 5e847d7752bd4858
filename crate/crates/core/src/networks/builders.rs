//! Graph construction for the three architectures.

use super::{Arch, LayerKind, NetworkSpec, Node};
use crate::error::{Error, Result};
use crate::tensor::Padding;

/// Slope of the leaky units of Model A.
pub const LEAKY_SLOPE: f64 = 0.1;
/// Dilations of the Model B bottleneck chain.
pub const BOTTLENECK_DILATIONS: [usize; 3] = [1, 2, 4];

/// Appends nodes while tracking channel counts.
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
}

impl GraphBuilder {
    /// A builder holding the input node (index 0).
    pub fn new(in_channels: usize) -> Self {
        GraphBuilder {
            nodes: vec![Node {
                name: "input".into(),
                kind: LayerKind::Input,
                inputs: vec![],
                channels: in_channels,
            }],
        }
    }

    pub fn input(&self) -> usize {
        0
    }

    pub fn channels(&self, i: usize) -> usize {
        self.nodes[i].channels
    }

    pub fn push(&mut self, name: impl Into<String>, kind: LayerKind, inputs: Vec<usize>, channels: usize) -> usize {
        self.nodes.push(Node {
            name: name.into(),
            kind,
            inputs,
            channels,
        });
        self.nodes.len() - 1
    }

    /// Renames a parameter-free node.
    pub fn rename(&mut self, i: usize, name: impl Into<String>) {
        debug_assert!(!self.nodes[i].kind.has_params());
        self.nodes[i].name = name.into();
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: impl Into<String>,
        x: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: Padding,
        dilation: usize,
    ) -> usize {
        let kind = LayerKind::Conv {
            kernel,
            stride,
            pad,
            dilation,
            bias: true,
        };
        self.push(name, kind, vec![x], cout)
    }

    /// Stride-1 convolution keeping the spatial size (odd kernels).
    pub fn conv_same(&mut self, name: impl Into<String>, x: usize, cout: usize, kernel: usize, dilation: usize) -> usize {
        self.conv(name, x, cout, kernel, 1, Padding::same(dilation * (kernel - 1) / 2), dilation)
    }

    pub fn tconv(&mut self, name: impl Into<String>, x: usize, cout: usize, kernel: usize, stride: usize) -> usize {
        let kind = LayerKind::ConvTranspose {
            kernel,
            stride,
            bias: true,
        };
        self.push(name, kind, vec![x], cout)
    }

    fn unary(&mut self, name: impl Into<String>, kind: LayerKind, x: usize) -> usize {
        let c = self.channels(x);
        self.push(name, kind, vec![x], c)
    }

    pub fn bn(&mut self, name: impl Into<String>, x: usize) -> usize {
        self.unary(name, LayerKind::BatchNorm, x)
    }

    pub fn relu(&mut self, name: impl Into<String>, x: usize) -> usize {
        self.unary(name, LayerKind::Relu, x)
    }

    pub fn leaky(&mut self, name: impl Into<String>, x: usize, slope: f64) -> usize {
        self.unary(name, LayerKind::LeakyRelu { slope }, x)
    }

    /// No node is added for a zero rate.
    pub fn dropout(&mut self, name: impl Into<String>, x: usize, rate: f64) -> usize {
        if rate == 0.0 {
            return x;
        }
        self.unary(name, LayerKind::Dropout { rate }, x)
    }

    pub fn maxpool(&mut self, name: impl Into<String>, x: usize) -> usize {
        self.unary(name, LayerKind::MaxPool { size: 2 }, x)
    }

    pub fn avgpool(&mut self, name: impl Into<String>, x: usize) -> usize {
        self.unary(name, LayerKind::AvgPool { size: 2 }, x)
    }

    pub fn upsample(&mut self, name: impl Into<String>, x: usize) -> usize {
        self.unary(name, LayerKind::Upsample, x)
    }

    pub fn concat(&mut self, name: impl Into<String>, xs: &[usize]) -> usize {
        let c = xs.iter().map(|&i| self.channels(i)).sum();
        self.push(name, LayerKind::Concat, xs.to_vec(), c)
    }

    pub fn add(&mut self, name: impl Into<String>, xs: &[usize]) -> usize {
        let c = self.channels(xs[0]);
        self.push(name, LayerKind::Add, xs.to_vec(), c)
    }

    /// conv `kernel`×`kernel` → BN → LeakyReLU(0.1), shape preserving.
    pub fn computational_unit(&mut self, prefix: &str, x: usize, cout: usize, kernel: usize) -> usize {
        let c = self.conv_same(format!("{prefix}.conv"), x, cout, kernel, 1);
        let b = self.bn(format!("{prefix}.bn"), c);
        self.leaky(format!("{prefix}.act"), b, LEAKY_SLOPE)
    }

    /// `proj(x) + unit2(unit1(x))`; `proj` is a 1×1 convolution when the
    /// channel count changes and the identity otherwise.
    pub fn computational_block(&mut self, prefix: &str, x: usize, cout: usize) -> usize {
        let u1 = self.computational_unit(&format!("{prefix}.unit1"), x, cout, 3);
        let u2 = self.computational_unit(&format!("{prefix}.unit2"), u1, cout, 3);
        let shortcut = if self.channels(x) == cout {
            x
        } else {
            self.conv_same(format!("{prefix}.proj"), x, cout, 1, 1)
        };
        self.add(format!("{prefix}.plus"), &[shortcut, u2])
    }

    /// `conv1×1(bilinear2x(x)) + tconv2×2,s2(x)`.
    pub fn expansive_unit(&mut self, prefix: &str, x: usize, cout: usize) -> usize {
        let up = self.upsample(format!("{prefix}.bilinear"), x);
        let proj = self.conv_same(format!("{prefix}.bilinear_proj"), up, cout, 1, 1);
        let t = self.tconv(format!("{prefix}.tconv"), x, cout, 2, 2);
        self.add(format!("{prefix}.combine"), &[proj, t])
    }

    /// `concat(conv3×3 s2, maxpool2×2, avgpool2×2)`, tripling the channels.
    pub fn downsample_block(&mut self, prefix: &str, x: usize) -> usize {
        let c = self.channels(x);
        let s = self.conv(format!("{prefix}.strided"), x, c, 3, 2, Padding::same(1), 1);
        let m = self.maxpool(format!("{prefix}.max"), x);
        let a = self.avgpool(format!("{prefix}.avg"), x);
        self.concat(format!("{prefix}.concat"), &[s, m, a])
    }

    /// `b0 = conv1×1(x)`, `bi = ReLU(BN(conv3×3 dilated(b(i−1))))`, output
    /// `b0 + b1 + … + bn`.
    pub fn dilated_bottleneck(&mut self, prefix: &str, x: usize, c: usize, dilations: &[usize]) -> usize {
        let b0 = self.conv_same(format!("{prefix}.b0"), x, c, 1, 1);
        let mut branches = vec![b0];
        let mut cur = b0;
        for (i, &d) in dilations.iter().enumerate() {
            let k = self.conv_same(format!("{prefix}.b{}.conv", i + 1), cur, c, 3, d);
            let n = self.bn(format!("{prefix}.b{}.bn", i + 1), k);
            cur = self.relu(format!("{prefix}.b{}.act", i + 1), n);
            branches.push(cur);
        }
        self.add(format!("{prefix}.sum"), &branches)
    }

    /// conv3×3 → BN → ReLU.
    fn conv_bn_relu(&mut self, prefix: &str, x: usize, cout: usize) -> usize {
        let c = self.conv_same(format!("{prefix}.conv"), x, cout, 3, 1);
        let b = self.bn(format!("{prefix}.bn"), c);
        self.relu(format!("{prefix}.act"), b)
    }

    pub fn finish(self, arch: Arch, base_width: usize, depth: usize, dropout_rate: f64, output: usize) -> NetworkSpec {
        NetworkSpec {
            arch,
            in_channels: self.nodes[0].channels,
            base_width,
            depth,
            dropout_rate,
            nodes: self.nodes,
            output,
        }
    }
}

fn check(in_channels: usize, base_width: usize, depth: usize, dropout_rate: f64) -> Result<Vec<usize>> {
    if in_channels == 0 || base_width == 0 {
        return Err(Error::invalid("network spec", "channel counts must be positive"));
    }
    if !(2..=8).contains(&depth) {
        return Err(Error::invalid("network spec", format!("depth must lie in 2..=8, got {depth}")));
    }
    if !(0.0..1.0).contains(&dropout_rate) {
        return Err(Error::invalid("network spec", format!("dropout rate {dropout_rate} outside [0, 1)")));
    }
    Ok((0..depth).map(|i| base_width << i).collect())
}

/// Classic U-Net: two 3×3 conv+ReLU per level, max-pool and dropout down,
/// bilinear 2x and a 2×2 conv up, skip concatenation, 1×1 head.
pub(super) fn baseline(in_channels: usize, base_width: usize, depth: usize, dropout_rate: f64) -> Result<NetworkSpec> {
    let widths = check(in_channels, base_width, depth, dropout_rate)?;
    let mut g = GraphBuilder::new(in_channels);
    let mut x = g.input();
    let mut skips = Vec::new();
    let double = |g: &mut GraphBuilder, p: &str, x: usize, c: usize| {
        let a = g.conv_same(format!("{p}.conv1"), x, c, 3, 1);
        let a = g.relu(format!("{p}.act1"), a);
        let b = g.conv_same(format!("{p}.conv2"), a, c, 3, 1);
        g.relu(format!("{p}.act2"), b)
    };
    for (i, &w) in widths[..depth - 1].iter().enumerate() {
        let p = format!("enc{}", i + 1);
        let s = double(&mut g, &p, x, w);
        g.rename(s, format!("{p}.skip"));
        skips.push(s);
        let m = g.maxpool(format!("{p}.pool"), s);
        x = g.dropout(format!("{p}.drop"), m, dropout_rate);
    }
    x = double(&mut g, "bottleneck", x, widths[depth - 1]);
    for i in (0..depth - 1).rev() {
        let p = format!("dec{}", i + 1);
        let up = g.upsample(format!("{p}.upsample"), x);
        // 2×2 "same" convolution pads one row and column at the far side
        let pad = Padding {
            top: 0,
            left: 0,
            bottom: 1,
            right: 1,
        };
        let c = g.conv(format!("{p}.upconv"), up, widths[i], 2, 1, pad, 1);
        let c = g.relu(format!("{p}.upact"), c);
        let cat = g.concat(format!("{p}.concat"), &[skips[i], c]);
        x = double(&mut g, &p, cat, widths[i]);
    }
    let out = g.conv_same("head.out", x, 1, 1, 1);
    Ok(g.finish(Arch::Baseline, base_width, depth, dropout_rate, out))
}

/// Residual computational blocks, 7×7 stem and dual-path expansive units.
pub(super) fn model_a(in_channels: usize, base_width: usize, depth: usize, dropout_rate: f64) -> Result<NetworkSpec> {
    let widths = check(in_channels, base_width, depth, dropout_rate)?;
    let mut g = GraphBuilder::new(in_channels);
    let mut x = g.computational_unit("stem", g.input(), widths[0], 7);
    let mut skips = Vec::new();
    for (i, &w) in widths[..depth - 1].iter().enumerate() {
        let p = format!("enc{}", i + 1);
        let s = g.computational_block(&format!("{p}.block"), x, w);
        g.rename(s, format!("{p}.skip"));
        skips.push(s);
        let m = g.maxpool(format!("{p}.pool"), s);
        x = g.dropout(format!("{p}.drop"), m, dropout_rate);
    }
    x = g.computational_block("bottleneck", x, widths[depth - 1]);
    for i in (0..depth - 1).rev() {
        let p = format!("dec{}", i + 1);
        let up = g.expansive_unit(&format!("{p}.expand"), x, widths[i]);
        let cat = g.concat(format!("{p}.concat"), &[skips[i], up]);
        x = g.computational_block(&format!("{p}.block"), cat, widths[i]);
    }
    let h = g.computational_unit("head.unit1", x, widths[0], 3);
    let h = g.computational_unit("head.unit2", h, widths[0], 3);
    let out = g.conv_same("head.out", h, 1, 1, 1);
    Ok(g.finish(Arch::ModelA, base_width, depth, dropout_rate, out))
}

/// Three-way downsampling, dilated bottleneck and a decoder without
/// transposed convolutions.
pub(super) fn model_b(in_channels: usize, base_width: usize, depth: usize, dropout_rate: f64) -> Result<NetworkSpec> {
    let widths = check(in_channels, base_width, depth, dropout_rate)?;
    let mut g = GraphBuilder::new(in_channels);
    let mut x = g.input();
    let mut skips = Vec::new();
    for (i, &w) in widths[..depth - 1].iter().enumerate() {
        let p = format!("enc{}", i + 1);
        let a = g.conv_bn_relu(&format!("{p}.unit1"), x, w);
        let s = g.conv_bn_relu(&format!("{p}.unit2"), a, w);
        g.rename(s, format!("{p}.skip"));
        skips.push(s);
        let d = g.downsample_block(&format!("{p}.down"), s);
        x = g.dropout(format!("{p}.drop"), d, dropout_rate);
    }
    x = g.dilated_bottleneck("bottleneck", x, widths[depth - 1], &BOTTLENECK_DILATIONS);
    for i in (0..depth - 1).rev() {
        let p = format!("dec{}", i + 1);
        let up = g.upsample(format!("{p}.upsample"), x);
        let c = g.conv_same(format!("{p}.upconv"), up, widths[i], 3, 1);
        let cat = g.concat(format!("{p}.concat"), &[skips[i], c]);
        let a = g.conv_bn_relu(&format!("{p}.unit1"), cat, widths[i]);
        x = g.conv_bn_relu(&format!("{p}.unit2"), a, widths[i]);
    }
    let out = g.conv_same("head.out", x, 1, 1, 1);
    Ok(g.finish(Arch::ModelB, base_width, depth, dropout_rate, out))
}

pub const DEFAULT_DROPOUT: f64 = 0.1;

pub fn build_baseline(in_channels: usize, base_width: usize) -> Result<NetworkSpec> {
    NetworkSpec::build(Arch::Baseline, in_channels, base_width, Arch::Baseline.default_depth(), DEFAULT_DROPOUT)
}

pub fn build_model_a(in_channels: usize, base_width: usize) -> Result<NetworkSpec> {
    NetworkSpec::build(Arch::ModelA, in_channels, base_width, Arch::ModelA.default_depth(), DEFAULT_DROPOUT)
}

pub fn build_model_b(in_channels: usize, base_width: usize) -> Result<NetworkSpec> {
    NetworkSpec::build(Arch::ModelB, in_channels, base_width, Arch::ModelB.default_depth(), DEFAULT_DROPOUT)
}
