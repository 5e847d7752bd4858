//! Declarative segmentation graphs: the baseline U-Net, Model A and Model B.
//!
//! A [`NetworkSpec`] is an ordered node list. Each node names its inputs by
//! index, so the graph is a DAG in topological order by construction.
//! Parameters live in a [`ParamStore`] under `<node>.<slot>` names.

mod builders;
pub mod checkpoint;

pub use builders::{
    build_baseline, build_model_a, build_model_b, GraphBuilder, BOTTLENECK_DILATIONS, DEFAULT_DROPOUT, LEAKY_SLOPE,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};

use crate::error::{Error, Result};
use crate::tensor::{BnState, Mode, Padding, ParamStore, PoolKind, Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Baseline,
    ModelA,
    ModelB,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Baseline => "baseline",
            Arch::ModelA => "model_a",
            Arch::ModelB => "model_b",
        }
    }

    /// Width of the first encoder level used when none is given.
    pub fn default_width(self) -> usize {
        match self {
            Arch::Baseline => 16,
            Arch::ModelA | Arch::ModelB => 32,
        }
    }

    pub fn default_depth(self) -> usize {
        match self {
            Arch::Baseline => 5,
            Arch::ModelA | Arch::ModelB => 4,
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Arch::Baseline),
            "model_a" => Ok(Arch::ModelA),
            "model_b" => Ok(Arch::ModelB),
            _ => Err(Error::invalid("arch", format!("unknown architecture `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerKind {
    Input,
    Conv {
        kernel: usize,
        stride: usize,
        pad: Padding,
        dilation: usize,
        bias: bool,
    },
    ConvTranspose {
        kernel: usize,
        stride: usize,
        bias: bool,
    },
    BatchNorm,
    Relu,
    LeakyRelu {
        slope: f64,
    },
    Dropout {
        rate: f64,
    },
    MaxPool {
        size: usize,
    },
    AvgPool {
        size: usize,
    },
    Upsample,
    Concat,
    Add,
}

impl LayerKind {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::ConvTranspose { .. } | LayerKind::BatchNorm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub inputs: Vec<usize>,
    /// Output channel count.
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub arch: Arch,
    pub in_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub dropout_rate: f64,
    pub nodes: Vec<Node>,
    /// Index of the logit head.
    pub output: usize,
}

/// Parameter slots `(suffix, trainable)` of a layer.
fn slots(kind: &LayerKind) -> &'static [(&'static str, bool)] {
    match kind {
        LayerKind::Conv { bias: true, .. } | LayerKind::ConvTranspose { bias: true, .. } => {
            &[("weight", true), ("bias", true)]
        }
        LayerKind::Conv { .. } | LayerKind::ConvTranspose { .. } => &[("weight", true)],
        LayerKind::BatchNorm => &[
            ("gamma", true),
            ("beta", true),
            ("running_mean", false),
            ("running_var", false),
        ],
        _ => &[],
    }
}

/// One parameter a spec declares.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub dims: Vec<usize>,
    pub trainable: bool,
    /// He-normal fan-in for kernels; `None` for vectors.
    pub fan_in: Option<usize>,
    pub fill: f32,
}

impl NetworkSpec {
    /// Builds the default graph of an architecture.
    pub fn build(arch: Arch, in_channels: usize, base_width: usize, depth: usize, dropout_rate: f64) -> Result<Self> {
        let spec = match arch {
            Arch::Baseline => builders::baseline(in_channels, base_width, depth, dropout_rate),
            Arch::ModelA => builders::model_a(in_channels, base_width, depth, dropout_rate),
            Arch::ModelB => builders::model_b(in_channels, base_width, depth, dropout_rate),
        }?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn node(&self, name: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.name == name)
    }

    /// Checks topological order, unique names, input arity and channel
    /// bookkeeping, and that the head is a 1×1 convolution to one channel.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid("network spec", m));
        if self.depth < 2 {
            return fail(format!("depth must be at least 2, got {}", self.depth));
        }
        let mut names = std::collections::HashSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if !names.insert(n.name.as_str()) {
                return fail(format!("duplicate node name `{}`", n.name));
            }
            if n.inputs.iter().any(|&j| j >= i) {
                return fail(format!("node `{}` reads a later node", n.name));
            }
            let arity_ok = match n.kind {
                LayerKind::Input => n.inputs.is_empty(),
                LayerKind::Concat => !n.inputs.is_empty(),
                LayerKind::Add => n.inputs.len() >= 2,
                _ => n.inputs.len() == 1,
            };
            if !arity_ok {
                return fail(format!("node `{}` has {} input(s)", n.name, n.inputs.len()));
            }
            let ch = |j: usize| self.nodes[j].channels;
            let consistent = match n.kind {
                LayerKind::Input => n.channels == self.in_channels,
                LayerKind::Concat => n.inputs.iter().map(|&j| ch(j)).sum::<usize>() == n.channels,
                LayerKind::Add => n.inputs.iter().all(|&j| ch(j) == n.channels),
                LayerKind::Conv { .. } | LayerKind::ConvTranspose { .. } => true,
                _ => ch(n.inputs[0]) == n.channels,
            };
            if !consistent {
                return fail(format!("channel bookkeeping broken at `{}`", n.name));
            }
        }
        match self.nodes.get(self.output) {
            Some(Node {
                kind: LayerKind::Conv { kernel: 1, .. },
                channels: 1,
                ..
            }) => Ok(()),
            _ => fail("output must be a 1x1 convolution to one channel".into()),
        }
    }

    /// Parameters in declaration order.
    pub fn param_decls(&self) -> Vec<ParamDecl> {
        let mut out = Vec::new();
        for n in &self.nodes {
            let cin = n.inputs.first().map_or(0, |&j| self.nodes[j].channels);
            for &(slot, trainable) in slots(&n.kind) {
                let (dims, fan_in, fill) = match (n.kind, slot) {
                    (LayerKind::Conv { kernel, .. }, "weight") => {
                        (vec![n.channels, cin, kernel, kernel], Some(cin * kernel * kernel), 0.0)
                    }
                    (LayerKind::ConvTranspose { kernel, stride, .. }, "weight") => (
                        vec![cin, n.channels, kernel, kernel],
                        Some((cin * kernel * kernel / (stride * stride)).max(1)),
                        0.0,
                    ),
                    (_, "gamma") | (_, "running_var") => (vec![n.channels], None, 1.0),
                    _ => (vec![n.channels], None, 0.0),
                };
                out.push(ParamDecl {
                    name: format!("{}.{slot}", n.name),
                    dims,
                    trainable,
                    fan_in,
                    fill,
                });
            }
        }
        out
    }

    /// `(total, trainable)` scalar counts, straight from the declarations.
    pub fn count_parameters(&self) -> (usize, usize) {
        let mut total = 0;
        let mut trainable = 0;
        for d in self.param_decls() {
            let n: usize = d.dims.iter().product();
            total += n;
            if d.trainable {
                trainable += n;
            }
        }
        (total, trainable)
    }

    /// He-normal kernels, zero biases, unit scales.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for d in self.param_decls() {
            let n: usize = d.dims.iter().product();
            let data = match d.fan_in {
                Some(fan_in) => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                        .map_err(|e| Error::invalid("init", e.to_string()))?;
                    (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
                }
                None => vec![d.fill; n],
            };
            store.insert(d.name, d.dims, data, d.trainable)?;
        }
        Ok(store)
    }

    /// Runs the graph on `x` and returns the logit node.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let sx = tape.shape(x);
        if sx.c != self.in_channels {
            return Err(Error::Shape {
                op: "forward",
                operand: "input",
                axis: "C",
                expected: self.in_channels,
                found: sx.c,
            });
        }
        let mut vals: Vec<Var> = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let inp = |k: usize| vals[n.inputs[k]];
            let p = |tape: &mut Tape<'_, T>, slot: &str| tape.param_by_name(&format!("{}.{slot}", n.name));
            let v = match n.kind {
                LayerKind::Input => x,
                LayerKind::Conv {
                    stride,
                    pad,
                    dilation,
                    bias,
                    ..
                } => {
                    let k = p(tape, "weight")?;
                    let b = if bias { Some(p(tape, "bias")?) } else { None };
                    tape.conv2d_padded(inp(0), k, b, stride, pad, dilation)?
                }
                LayerKind::ConvTranspose { stride, bias, .. } => {
                    let k = p(tape, "weight")?;
                    let b = if bias { Some(p(tape, "bias")?) } else { None };
                    tape.conv_transpose2d(inp(0), k, b, stride)?
                }
                LayerKind::BatchNorm => {
                    let g = p(tape, "gamma")?;
                    let b = p(tape, "beta")?;
                    let params = tape.params();
                    let state = BnState {
                        running_mean: params.require(&format!("{}.running_mean", n.name))?,
                        running_var: params.require(&format!("{}.running_var", n.name))?,
                    };
                    tape.batch_norm(inp(0), g, b, state)?
                }
                LayerKind::Relu => tape.relu(inp(0))?,
                LayerKind::LeakyRelu { slope } => tape.leaky_relu(inp(0), slope)?,
                LayerKind::Dropout { rate } => tape.dropout(inp(0), rate)?,
                LayerKind::MaxPool { size } => tape.pool2d(inp(0), PoolKind::Max, size, size)?,
                LayerKind::AvgPool { size } => tape.pool2d(inp(0), PoolKind::Avg, size, size)?,
                LayerKind::Upsample => tape.upsample_bilinear2x(inp(0))?,
                LayerKind::Concat => {
                    let xs: Vec<Var> = n.inputs.iter().map(|&j| vals[j]).collect();
                    tape.concat_channels(&xs)?
                }
                LayerKind::Add => {
                    let mut acc = inp(0);
                    for k in 1..n.inputs.len() {
                        acc = tape.add(acc, inp(k))?;
                    }
                    acc
                }
            };
            vals.push(v);
        }
        Ok(vals[self.output])
    }

    /// Forward pass in inference mode returning logits.
    pub fn predict_logits(&self, params: &ParamStore, x: Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(params, Mode::Infer, 0);
        let xv = tape.constant(x);
        let out = self.forward(&mut tape, xv)?;
        Ok(tape.value(out).clone())
    }

    // graph audit

    /// Nodes reading node `i`.
    pub fn consumers(&self, i: usize) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&j| self.nodes[j].inputs.contains(&i)).collect()
    }

    pub fn count_kind(&self, pred: impl Fn(&LayerKind) -> bool) -> usize {
        self.nodes.iter().filter(|n| pred(&n.kind)).count()
    }

    pub fn transposed_convs(&self) -> usize {
        self.count_kind(|k| matches!(k, LayerKind::ConvTranspose { .. }))
    }

    /// Dilations of the 3×3 convolutions whose names start with `prefix`,
    /// in graph order.
    pub fn dilations(&self, prefix: &str) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| n.name.starts_with(prefix))
            .filter_map(|n| match n.kind {
                LayerKind::Conv { kernel: 3, dilation, .. } => Some(dilation),
                _ => None,
            })
            .collect()
    }

    /// Nodes of a kind whose names start with `prefix`.
    pub fn nodes_under<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a Node> + 'a {
        self.nodes.iter().filter(move |n| n.name.starts_with(prefix))
    }

    /// Skip sources (nodes named `*.skip`) and their consumers outside the
    /// encoder.
    pub fn skip_consumers(&self) -> Vec<(String, Vec<String>)> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.name.ends_with(".skip"))
            .map(|(i, n)| {
                let level = format!("{}.", n.name.trim_end_matches(".skip"));
                let readers = self
                    .consumers(i)
                    .into_iter()
                    .map(|j| self.nodes[j].name.clone())
                    .filter(|name| !name.starts_with(&level))
                    .collect();
                (n.name.clone(), readers)
            })
            .collect()
    }
}
