//! Network topology, per-layer parameters and memory accounting.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

use crate::po2::{packed_len, Po2Weight};

/// Accumulator fractional bits contributed by a weight exponent of -7.
pub const WEIGHT_FRAC_BITS: i32 = 7;

/// Width of activations in the multiplier-free datapath.
pub const ACTIVATION_BITS: u32 = 8;

pub const MIB: f64 = (1u64 << 20) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Float32,
    MfDfp,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Float32 => "float32",
            Precision::MfDfp => "mf_dfp",
        })
    }
}

/// Channels-height-width activation shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape3 {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    /// A flat vector of `n` features.
    pub const fn flat(n: usize) -> Self {
        Self::new(n, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

impl fmt::Display for Shape3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerOp {
    Convolution {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    FullyConnected {
        inputs: usize,
        outputs: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    Relu,
}

impl LayerOp {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerOp::Convolution { .. } => "convolution",
            LayerOp::FullyConnected { .. } => "fully_connected",
            LayerOp::MaxPool { .. } => "max_pool",
            LayerOp::AvgPool { .. } => "avg_pool",
            LayerOp::Relu => "relu",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerOp::Convolution { .. } | LayerOp::FullyConnected { .. }
        )
    }

    /// Weight and bias counts for parameterized layers.
    pub fn param_counts(&self) -> (usize, usize) {
        match *self {
            LayerOp::Convolution {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => (out_channels * in_channels * kernel_h * kernel_w, out_channels),
            LayerOp::FullyConnected { inputs, outputs } => (inputs * outputs, outputs),
            _ => (0, 0),
        }
    }

    /// Products summed per output element (kernel volume).
    pub fn kernel_volume(&self) -> usize {
        match *self {
            LayerOp::Convolution {
                in_channels,
                kernel_h,
                kernel_w,
                ..
            } => in_channels * kernel_h * kernel_w,
            LayerOp::FullyConnected { inputs, .. } => inputs,
            _ => 0,
        }
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: Shape3) -> Result<Shape3, String> {
        match *self {
            LayerOp::Convolution {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
            } => {
                if input.channels != in_channels {
                    return Err(format!(
                        "expects {in_channels} input channels, previous layer yields {}",
                        input.channels
                    ));
                }
                let h = window_out(input.height, kernel_h, stride, padding)?;
                let w = window_out(input.width, kernel_w, stride, padding)?;
                if out_channels == 0 {
                    return Err("zero output channels".into());
                }
                Ok(Shape3::new(out_channels, h, w))
            }
            LayerOp::FullyConnected { inputs, outputs } => {
                if input.len() != inputs {
                    return Err(format!(
                        "expects {inputs} inputs, previous layer yields {} ({input})",
                        input.len()
                    ));
                }
                if outputs == 0 {
                    return Err("zero outputs".into());
                }
                Ok(Shape3::flat(outputs))
            }
            LayerOp::MaxPool { kernel, stride } | LayerOp::AvgPool { kernel, stride } => {
                let h = window_out(input.height, kernel, stride, 0)?;
                let w = window_out(input.width, kernel, stride, 0)?;
                Ok(Shape3::new(input.channels, h, w))
            }
            LayerOp::Relu => Ok(input),
        }
    }
}

fn window_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize, String> {
    if stride == 0 {
        return Err("zero stride".into());
    }
    if kernel == 0 {
        return Err("zero kernel".into());
    }
    let padded = size + 2 * padding;
    if padded < kernel {
        return Err(format!(
            "kernel {kernel} larger than padded input {padded}"
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Layer weights, laid out `[out][in][kh][kw]` (or `[out][in]`).
#[derive(Debug, Clone, PartialEq)]
pub enum Weights {
    Float(Vec<f32>),
    Po2(Vec<Po2Weight>),
}

impl Weights {
    pub fn len(&self) -> usize {
        match self {
            Weights::Float(w) => w.len(),
            Weights::Po2(w) => w.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn precision(&self) -> Precision {
        match self {
            Weights::Float(_) => Precision::Float32,
            Weights::Po2(_) => Precision::MfDfp,
        }
    }
}

/// Layer biases. Fixed biases are integers at the accumulator's fractional length `m + 7`.
#[derive(Debug, Clone, PartialEq)]
pub enum Bias {
    Float(Vec<f32>),
    Fixed(Vec<i32>),
}

impl Bias {
    pub fn len(&self) -> usize {
        match self {
            Bias::Float(b) => b.len(),
            Bias::Fixed(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn precision(&self) -> Precision {
        match self {
            Bias::Float(_) => Precision::Float32,
            Bias::Fixed(_) => Precision::MfDfp,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub op: LayerOp,
    /// Fractional length of the 8-bit input.
    pub m: i32,
    /// Fractional length of the 8-bit output.
    pub n: i32,
    pub weights: Option<Weights>,
    pub bias: Option<Bias>,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, op: LayerOp) -> Self {
        Self {
            name: name.into(),
            op,
            m: 0,
            n: 0,
            weights: None,
            bias: None,
        }
    }

    pub fn conv(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self::new(
            name,
            LayerOp::Convolution {
                in_channels,
                out_channels,
                kernel_h: kernel,
                kernel_w: kernel,
                stride,
                padding,
            },
        )
    }

    pub fn fc(name: impl Into<String>, inputs: usize, outputs: usize) -> Self {
        Self::new(name, LayerOp::FullyConnected { inputs, outputs })
    }

    pub fn max_pool(name: impl Into<String>, kernel: usize, stride: usize) -> Self {
        Self::new(name, LayerOp::MaxPool { kernel, stride })
    }

    pub fn avg_pool(name: impl Into<String>, kernel: usize, stride: usize) -> Self {
        Self::new(name, LayerOp::AvgPool { kernel, stride })
    }

    pub fn relu(name: impl Into<String>) -> Self {
        Self::new(name, LayerOp::Relu)
    }

    pub fn with_radix(mut self, m: i32, n: i32) -> Self {
        self.m = m;
        self.n = n;
        self
    }

    pub fn with_params(mut self, weights: Weights, bias: Bias) -> Self {
        self.weights = Some(weights);
        self.bias = Some(bias);
        self
    }

    /// Fractional length of the layer's accumulator.
    pub fn accumulator_frac(&self) -> i32 {
        self.m + WEIGHT_FRAC_BITS
    }

    pub fn po2_weights(&self) -> Option<&[Po2Weight]> {
        match &self.weights {
            Some(Weights::Po2(w)) => Some(w),
            _ => None,
        }
    }

    pub fn fixed_bias(&self) -> Option<&[i32]> {
        match &self.bias {
            Some(Bias::Fixed(b)) => Some(b),
            _ => None,
        }
    }

    pub fn float_weights(&self) -> Option<&[f32]> {
        match &self.weights {
            Some(Weights::Float(w)) => Some(w),
            _ => None,
        }
    }

    pub fn float_bias(&self) -> Option<&[f32]> {
        match &self.bias {
            Some(Bias::Float(b)) => Some(b),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkDef {
    pub input_shape: Shape3,
    pub precision: Precision,
    /// Logit count `N`.
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkDef {
    /// Assemble a network, deriving the class count from the last layer.
    pub fn new(input_shape: Shape3, precision: Precision, layers: Vec<LayerSpec>) -> Self {
        let mut net = Self {
            input_shape,
            precision,
            classes: 0,
            layers,
        };
        net.classes = net
            .layer_shapes()
            .ok()
            .and_then(|s| s.last().copied())
            .map_or(0, |s| s.len());
        net
    }

    /// Input shape of every layer followed by the network output shape.
    pub fn layer_shapes(&self) -> Result<Vec<Shape3>, (usize, String)> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        let mut shape = self.input_shape;
        shapes.push(shape);
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer.op.output_shape(shape).map_err(|e| (i, e))?;
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// Largest kernel volume plus one bias term.
    pub fn max_fanin(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.op.has_params())
            .map(|l| l.op.kernel_volume() + 1)
            .max()
            .unwrap_or(1)
    }

    /// Accumulator width that keeps every layer of this network overflow-free.
    pub fn accumulator_width(&self) -> u32 {
        accumulator_width(self.max_fanin())
    }

    /// Two networks share a topology when shapes and layer operations agree.
    pub fn same_topology(&self, other: &NetworkDef) -> bool {
        self.input_shape == other.input_shape
            && self.classes == other.classes
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.op == b.op)
    }
}

/// `8 + 7 + ceil(log2(max_fanin + 1)) + 1` bits.
pub fn accumulator_width(max_fanin: usize) -> u32 {
    let c = usize::BITS - max_fanin.leading_zeros();
    // c = ceil(log2(max_fanin + 1)) for max_fanin >= 0
    ACTIVATION_BITS + WEIGHT_FRAC_BITS as u32 + c + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rule {
    EmptyNetwork,
    ShapeMismatch,
    ClassCount,
    MissingWeights,
    MissingBias,
    SpuriousWeights,
    PrecisionMismatch,
    WeightCount,
    BiasCount,
    RadixChain,
    FormatPreserving,
}

impl Rule {
    pub fn id(&self) -> &'static str {
        match self {
            Rule::EmptyNetwork => "empty-network",
            Rule::ShapeMismatch => "shape-mismatch",
            Rule::ClassCount => "class-count",
            Rule::MissingWeights => "missing-weights",
            Rule::MissingBias => "missing-bias",
            Rule::SpuriousWeights => "spurious-weights",
            Rule::PrecisionMismatch => "precision-mismatch",
            Rule::WeightCount => "weight-count",
            Rule::BiasCount => "bias-count",
            Rule::RadixChain => "radix-chain",
            Rule::FormatPreserving => "format-preserving",
        }
    }

    /// Rules that only look at the topology, not at the parameters.
    pub fn is_structural(&self) -> bool {
        matches!(
            self,
            Rule::EmptyNetwork | Rule::ShapeMismatch | Rule::ClassCount
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// `None` for network-level rules.
    pub layer: Option<usize>,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(i) => write!(f, "layer {i}: {}: {}", self.rule.id(), self.detail),
            None => write!(f, "network: {}: {}", self.rule.id(), self.detail),
        }
    }
}

pub fn validate_graph(net: &NetworkDef) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |layer: Option<usize>, rule: Rule, detail: String| {
        out.push(Violation {
            layer,
            rule,
            detail,
        })
    };

    if net.layers.is_empty() {
        push(None, Rule::EmptyNetwork, "network has no layers".into());
        return out;
    }

    match net.layer_shapes() {
        Ok(shapes) => {
            let logits = shapes.last().map_or(0, Shape3::len);
            if logits != net.classes {
                push(
                    None,
                    Rule::ClassCount,
                    format!("declares {} classes, final layer yields {logits}", net.classes),
                );
            }
        }
        Err((i, e)) => push(Some(i), Rule::ShapeMismatch, e),
    }

    for (i, layer) in net.layers.iter().enumerate() {
        let at = Some(i);
        if layer.op.has_params() {
            let (wc, bc) = layer.op.param_counts();
            match &layer.weights {
                None => push(at, Rule::MissingWeights, "no weight blob".into()),
                Some(w) => {
                    if w.precision() != net.precision {
                        push(
                            at,
                            Rule::PrecisionMismatch,
                            format!("{} weights in a {} network", w.precision(), net.precision),
                        );
                    }
                    if w.len() != wc {
                        push(
                            at,
                            Rule::WeightCount,
                            format!("expected {wc} weights, found {}", w.len()),
                        );
                    }
                }
            }
            match &layer.bias {
                None => push(at, Rule::MissingBias, "no bias blob".into()),
                Some(b) => {
                    if b.precision() != net.precision {
                        push(
                            at,
                            Rule::PrecisionMismatch,
                            format!("{} bias in a {} network", b.precision(), net.precision),
                        );
                    }
                    if b.len() != bc {
                        push(
                            at,
                            Rule::BiasCount,
                            format!("expected {bc} biases, found {}", b.len()),
                        );
                    }
                }
            }
        } else if layer.weights.is_some() || layer.bias.is_some() {
            push(
                at,
                Rule::SpuriousWeights,
                format!("{} layer carries parameters", layer.op.kind()),
            );
        }

        if net.precision == Precision::MfDfp {
            if matches!(layer.op, LayerOp::MaxPool { .. } | LayerOp::Relu) && layer.m != layer.n {
                push(
                    at,
                    Rule::FormatPreserving,
                    format!("{} must keep m = n, got m={} n={}", layer.op.kind(), layer.m, layer.n),
                );
            }
            if i > 0 {
                let prev = &net.layers[i - 1];
                if prev.n != layer.m {
                    push(
                        at,
                        Rule::RadixChain,
                        format!("m={} but previous layer's n={}", layer.m, prev.n),
                    );
                }
            }
        }
    }
    out
}

/// Parameter storage in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Footprint {
    pub weight_count: usize,
    pub bias_count: usize,
    pub weight_bytes: usize,
    pub bias_bytes: usize,
}

impl Footprint {
    pub fn total_bytes(&self) -> usize {
        self.weight_bytes + self.bias_bytes
    }

    pub fn mib(&self) -> f64 {
        self.total_bytes() as f64 / MIB
    }
}

impl std::ops::Add for Footprint {
    type Output = Footprint;

    fn add(self, rhs: Footprint) -> Footprint {
        Footprint {
            weight_count: self.weight_count + rhs.weight_count,
            bias_count: self.bias_count + rhs.bias_count,
            weight_bytes: self.weight_bytes + rhs.weight_bytes,
            bias_bytes: self.bias_bytes + rhs.bias_bytes,
        }
    }
}

impl std::iter::Sum for Footprint {
    fn sum<I: Iterator<Item = Footprint>>(iter: I) -> Footprint {
        iter.fold(Footprint::default(), |a, b| a + b)
    }
}

/// Storage needed by `net`'s parameters in its own precision.
///
/// Float32 takes 4 bytes per weight; mf_dfp packs two weights per byte
/// (per layer, rounded up). Biases take 4 bytes in both modes.
pub fn memory_footprint(net: &NetworkDef) -> Footprint {
    footprint_as(net, net.precision)
}

/// Footprint of `net`'s topology stored at `precision`.
pub fn footprint_as(net: &NetworkDef, precision: Precision) -> Footprint {
    net.layers
        .iter()
        .map(|l| {
            let (wc, bc) = l.op.param_counts();
            let weight_bytes = match precision {
                Precision::Float32 => 4 * wc,
                Precision::MfDfp => packed_len(wc),
            };
            Footprint {
                weight_count: wc,
                bias_count: bc,
                weight_bytes,
                bias_bytes: 4 * bc,
            }
        })
        .sum()
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error("an ensemble needs at least one member")]
    Empty,
    #[error("member {0} does not share the first member's topology")]
    TopologyMismatch(usize),
}

/// `M` networks of one topology whose logits are averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleDef {
    members: Vec<NetworkDef>,
}

impl EnsembleDef {
    pub fn new(members: Vec<NetworkDef>) -> Result<Self, EnsembleError> {
        let first = members.first().ok_or(EnsembleError::Empty)?;
        if let Some(i) = members.iter().position(|m| !first.same_topology(m)) {
            return Err(EnsembleError::TopologyMismatch(i));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[NetworkDef] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn footprint(&self) -> Footprint {
        self.members.iter().map(memory_footprint).sum()
    }
}
