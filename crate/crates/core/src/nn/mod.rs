//! Inference-only network engine: layer parameters, the model graph, and the
//! forward pass used for rewards and reconstruction diagnostics.

mod eval;
pub(crate) use eval::next_weighted;
mod ops;

pub use eval::{
    accuracy, accuracy_with_workers, argmax, feature_map_error, forward, forward_sample, pre_activation, Logits,
};
pub use ops::{bn_forward, conv_forward, relu};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    #[default]
    None,
}

/// Convolution kernel `(out, in, k, k)` with symmetric zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    out: usize,
    inp: usize,
    k: usize,
    stride: usize,
    padding: usize,
    data: Vec<f32>,
}

impl ConvWeights {
    pub fn new(out: usize, inp: usize, k: usize, stride: usize, padding: usize, data: Vec<f32>) -> Result<Self> {
        if out == 0 || inp == 0 || k == 0 {
            return Err(Error::Shape(format!(
                "conv dims must be positive, got ({out}, {inp}, {k}, {k})"
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("conv stride must be positive".into()));
        }
        if data.len() != out * inp * k * k {
            return Err(Error::Shape(format!(
                "conv ({out}, {inp}, {k}, {k}) needs {} weights, got {}",
                out * inp * k * k,
                data.len()
            )));
        }
        Ok(Self {
            out,
            inp,
            k,
            stride,
            padding,
            data,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out
    }

    pub fn in_channels(&self) -> usize {
        self.inp
    }

    pub fn kernel(&self) -> usize {
        self.k
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.out, self.inp, self.k, self.k]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < self.k || wp < self.k {
            return Err(Error::Shape(format!(
                "input {h}x{w} with padding {} is smaller than kernel {}",
                self.padding, self.k
            )));
        }
        Ok(((hp - self.k) / self.stride + 1, (wp - self.k) / self.stride + 1))
    }

    pub fn with_data(&self, out: usize, inp: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(out, inp, self.k, self.stride, self.padding, data)
    }
}

/// Fully-connected weights, `out x in` row-major, with optional bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearWeights {
    out: usize,
    inp: usize,
    data: Vec<f32>,
    bias: Option<Vec<f32>>,
}

impl LinearWeights {
    pub fn new(out: usize, inp: usize, data: Vec<f32>, bias: Option<Vec<f32>>) -> Result<Self> {
        if out == 0 || inp == 0 {
            return Err(Error::Shape(format!(
                "linear dims must be positive, got ({out}, {inp})"
            )));
        }
        if data.len() != out * inp {
            return Err(Error::Shape(format!(
                "linear ({out}, {inp}) needs {} weights, got {}",
                out * inp,
                data.len()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != out {
                return Err(Error::Shape(format!(
                    "linear bias length {} does not match {out} outputs",
                    b.len()
                )));
            }
        }
        Ok(Self { out, inp, data, bias })
    }

    pub fn out_features(&self) -> usize {
        self.out
    }

    pub fn in_features(&self) -> usize {
        self.inp
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn bias(&self) -> Option<&[f32]> {
        self.bias.as_deref()
    }
}

/// Per-channel batch-norm statistics. `sigma_j = sqrt(var_j + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f64,
}

pub const DEFAULT_BN_EPS: f64 = 1e-5;

impl BnParams {
    pub fn new(gamma: Vec<f32>, beta: Vec<f32>, mean: Vec<f32>, var: Vec<f32>, eps: f64) -> Result<Self> {
        let n = gamma.len();
        if beta.len() != n || mean.len() != n || var.len() != n {
            return Err(Error::Shape(format!(
                "batch-norm vectors differ in length: gamma {n}, beta {}, mean {}, var {}",
                beta.len(),
                mean.len(),
                var.len()
            )));
        }
        if var.iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::Shape("batch-norm variance must be >= 0".into()));
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Shape("batch-norm epsilon must be positive".into()));
        }
        Ok(Self {
            gamma,
            beta,
            mean,
            var,
            eps,
        })
    }

    /// Identity normalization for `n` channels (`var = 1 - eps`).
    pub fn identity(n: usize) -> Self {
        Self {
            gamma: vec![1.0; n],
            beta: vec![0.0; n],
            mean: vec![0.0; n],
            var: vec![(1.0 - DEFAULT_BN_EPS) as f32; n],
            eps: DEFAULT_BN_EPS,
        }
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    pub fn sigma(&self, j: usize) -> f64 {
        (self.var[j] as f64 + self.eps).sqrt()
    }

    /// Keeps the listed channels, in order.
    pub fn select(&self, keep: &[usize]) -> Self {
        let pick = |v: &[f32]| keep.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Self {
            gamma: pick(&self.gamma),
            beta: pick(&self.beta),
            mean: pick(&self.mean),
            var: pick(&self.var),
            eps: self.eps,
        }
    }
}

/// Weight tensors whose leading axis is the output channel.
pub trait ChannelRows {
    fn out_channels(&self) -> usize;
    fn row_len(&self) -> usize;
    fn row(&self, o: usize) -> &[f32];
}

impl ChannelRows for ConvWeights {
    fn out_channels(&self) -> usize {
        self.out
    }

    fn row_len(&self) -> usize {
        self.inp * self.k * self.k
    }

    fn row(&self, o: usize) -> &[f32] {
        let len = self.row_len();
        &self.data[o * len..(o + 1) * len]
    }
}

impl ChannelRows for LinearWeights {
    fn out_channels(&self) -> usize {
        self.out
    }

    fn row_len(&self) -> usize {
        self.inp
    }

    fn row(&self, o: usize) -> &[f32] {
        &self.data[o * self.inp..(o + 1) * self.inp]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weights: ConvWeights,
    pub bn: Option<BnParams>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weights: LinearWeights,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerNode {
    Conv(ConvLayer),
    Linear(LinearLayer),
    GlobalAvgPool,
    Flatten,
    /// Opens an identity-shortcut block; the block input is added back at
    /// the matching [`LayerNode::ResidualEnd`].
    ResidualBegin,
    ResidualEnd,
}

impl LayerNode {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerNode::Conv(_) => "conv",
            LayerNode::Linear(_) => "linear",
            LayerNode::GlobalAvgPool => "global_avg_pool",
            LayerNode::Flatten => "flatten",
            LayerNode::ResidualBegin => "residual_begin",
            LayerNode::ResidualEnd => "residual_end",
        }
    }

    /// Weighted layers expose their output-channel rows.
    pub fn channel_rows(&self) -> Option<&dyn ChannelRows> {
        match self {
            LayerNode::Conv(c) => Some(&c.weights),
            LayerNode::Linear(l) => Some(&l.weights),
            _ => None,
        }
    }

    pub fn bn(&self) -> Option<&BnParams> {
        match self {
            LayerNode::Conv(c) => c.bn.as_ref(),
            _ => None,
        }
    }

    /// Learnable parameter count (batch-norm running statistics excluded).
    pub fn param_count(&self) -> usize {
        match self {
            LayerNode::Conv(c) => c.weights.data.len() + c.bn.as_ref().map_or(0, |bn| 2 * bn.len()),
            LayerNode::Linear(l) => l.weights.data.len() + l.weights.bias.as_ref().map_or(0, Vec::len),
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub node: LayerNode,
}

impl Layer {
    pub fn new(name: impl Into<String>, node: LayerNode) -> Self {
        Self {
            name: name.into(),
            node,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

/// Activation shape after a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Map {
        c: usize,
        h: usize,
        w: usize,
    },
    /// Flattened features; `channels` is the channel count that was flattened
    /// (each channel owns `features / channels` consecutive features) or the
    /// feature count itself after a linear layer.
    Flat {
        features: usize,
        channels: usize,
    },
}

impl ActShape {
    /// Number of channels a pruning decision on the producing layer acts on.
    pub fn channels(&self) -> usize {
        match *self {
            ActShape::Map { c, .. } => c,
            ActShape::Flat { channels, .. } => channels,
        }
    }
}

/// An ordered, validated layer list.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    input: InputShape,
    layers: Vec<Layer>,
    num_classes: usize,
}

impl ModelGraph {
    pub fn new(input: InputShape, layers: Vec<Layer>, num_classes: usize) -> Result<Self> {
        let graph = Self {
            input,
            layers,
            num_classes,
        };
        graph.shapes()?;
        Ok(graph)
    }

    pub fn input(&self) -> InputShape {
        self.input
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, index: usize) -> Option<&Layer> {
        self.layers.get(index)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.node.param_count()).sum()
    }

    /// Replaces layers by index and re-validates the result.
    pub fn with_layers(&self, replacements: Vec<(usize, LayerNode)>) -> Result<Self> {
        let mut layers = self.layers.clone();
        for (index, node) in replacements {
            let slot = layers
                .get_mut(index)
                .ok_or_else(|| Error::InvalidGraph(format!("layer index {index} out of range")))?;
            slot.node = node;
        }
        Self::new(self.input, layers, self.num_classes)
    }

    /// Walks the layer list checking the channel chain; returns the activation
    /// shape after every layer.
    pub fn shapes(&self) -> Result<Vec<ActShape>> {
        if self.num_classes == 0 {
            return Err(Error::InvalidGraph("num_classes must be positive".into()));
        }
        if self.input.c == 0 || self.input.h == 0 || self.input.w == 0 {
            return Err(Error::InvalidGraph("input dims must be positive".into()));
        }
        let mut names = std::collections::HashSet::new();
        let mut shape = ActShape::Map {
            c: self.input.c,
            h: self.input.h,
            w: self.input.w,
        };
        // (shape at block entry, convs seen inside the block)
        let mut blocks: Vec<(ActShape, usize)> = Vec::new();
        let mut out = Vec::with_capacity(self.layers.len());
        for (index, layer) in self.layers.iter().enumerate() {
            if !names.insert(layer.name.as_str()) {
                return Err(Error::InvalidGraph(format!("duplicate layer name `{}`", layer.name)));
            }
            let wrap = |e: Error| e.at_layer(index, &layer.name);
            shape = match (&layer.node, shape) {
                (LayerNode::Conv(conv), ActShape::Map { c, h, w }) => {
                    let wts = &conv.weights;
                    if wts.inp != c {
                        return Err(wrap(Error::Shape(format!(
                            "conv expects {} input channels, predecessor produces {c}",
                            wts.inp
                        ))));
                    }
                    if let Some(bn) = &conv.bn {
                        if bn.len() != wts.out {
                            return Err(wrap(Error::Shape(format!(
                                "batch-norm has {} channels, conv produces {}",
                                bn.len(),
                                wts.out
                            ))));
                        }
                    }
                    let (oh, ow) = wts.output_size(h, w).map_err(wrap)?;
                    if let Some(block) = blocks.last_mut() {
                        block.1 += 1;
                    }
                    ActShape::Map {
                        c: wts.out,
                        h: oh,
                        w: ow,
                    }
                }
                (LayerNode::Conv(_), ActShape::Flat { .. }) => {
                    return Err(wrap(Error::Shape("conv after flatten".into())))
                }
                (LayerNode::Linear(lin), ActShape::Flat { features, .. }) => {
                    if lin.weights.inp != features {
                        return Err(wrap(Error::Shape(format!(
                            "linear expects {} input features, predecessor produces {features}",
                            lin.weights.inp
                        ))));
                    }
                    ActShape::Flat {
                        features: lin.weights.out,
                        channels: lin.weights.out,
                    }
                }
                (LayerNode::Linear(_), ActShape::Map { .. }) => {
                    return Err(wrap(Error::Shape("linear layer needs a flatten before it".into())))
                }
                (LayerNode::GlobalAvgPool, ActShape::Map { c, .. }) => ActShape::Map { c, h: 1, w: 1 },
                (LayerNode::Flatten, ActShape::Map { c, h, w }) => ActShape::Flat {
                    features: c * h * w,
                    channels: c,
                },
                (LayerNode::GlobalAvgPool | LayerNode::Flatten, ActShape::Flat { .. }) => {
                    return Err(wrap(Error::Shape(format!(
                        "{} on an already flattened activation",
                        layer.node.kind()
                    ))))
                }
                (LayerNode::ResidualBegin, s @ ActShape::Map { .. }) => {
                    blocks.push((s, 0));
                    s
                }
                (LayerNode::ResidualEnd, s) => {
                    let (entry, convs) = blocks
                        .pop()
                        .ok_or_else(|| wrap(Error::InvalidGraph("residual_end without residual_begin".into())))?;
                    if convs == 0 {
                        return Err(wrap(Error::InvalidGraph(
                            "residual block encloses no conv layer".into(),
                        )));
                    }
                    if entry != s {
                        return Err(wrap(Error::Shape(format!(
                            "identity shortcut shape {entry:?} differs from block output {s:?}"
                        ))));
                    }
                    if let Some(outer) = blocks.last_mut() {
                        outer.1 += convs;
                    }
                    s
                }
                (LayerNode::ResidualBegin, ActShape::Flat { .. }) => {
                    return Err(wrap(Error::InvalidGraph("residual block on flattened features".into())))
                }
            };
            out.push(shape);
        }
        if !blocks.is_empty() {
            return Err(Error::InvalidGraph("unterminated residual block".into()));
        }
        match shape {
            ActShape::Flat { features, .. } if features == self.num_classes => Ok(out),
            other => Err(Error::InvalidGraph(format!(
                "final activation {other:?} does not produce {} class logits",
                self.num_classes
            ))),
        }
    }

    /// Multiply-accumulate count of one forward pass (conv and linear only).
    pub fn macs(&self) -> u64 {
        let shapes = self.shapes().expect("validated graph");
        self.layers
            .iter()
            .zip(&shapes)
            .map(|(layer, shape)| match (&layer.node, shape) {
                (LayerNode::Conv(c), ActShape::Map { h, w, .. }) => {
                    let k = c.weights.k as u64;
                    (c.weights.out * c.weights.inp) as u64 * k * k * (*h * *w) as u64
                }
                (LayerNode::Linear(l), _) => (l.weights.out * l.weights.inp) as u64,
                _ => 0,
            })
            .sum()
    }

    /// Activation shape entering layer `index`.
    pub fn input_shape_of(&self, index: usize) -> Result<ActShape> {
        if index == 0 {
            let InputShape { c, h, w } = self.input;
            return Ok(ActShape::Map { c, h, w });
        }
        self.shapes()?
            .get(index - 1)
            .copied()
            .ok_or_else(|| Error::InvalidGraph(format!("layer index {index} out of range")))
    }
}
