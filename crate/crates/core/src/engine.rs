//! Forward inference.
//!
//! The multiplier-free path keeps activations as 8-bit dynamic fixed-point
//! integers and weights as powers of two. A product `x · s·2^e` becomes
//! `(s·x) << (7 + e)` in an accumulator at fractional length `m + 7`, so
//! accumulation is exact. The only rounding happens when the accumulator is
//! routed to the layer's output format `⟨8, n⟩`.

use thiserror::Error;

use crate::dfp::{encode_int, requantize_int, DfpFormat, DfpTensor, DfpValue, RoundMode};
use crate::graph::{
    validate_graph, LayerOp, LayerSpec, NetworkDef, Precision, Shape3, Violation,
    WEIGHT_FRAC_BITS,
};
use crate::po2::Po2Weight;

/// Largest magnitude a bias may take at the accumulator's fractional length:
/// one full-scale product, so a bias occupies exactly one fan-in slot.
pub const BIAS_LIMIT: i64 = 127 << WEIGHT_FRAC_BITS;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("layer {layer}: expected input {expected}, got shape {actual:?}")]
    ShapeMismatch {
        layer: usize,
        expected: Shape3,
        actual: Vec<usize>,
    },
    #[error("layer {layer}: input radix {actual} does not match m = {expected}")]
    RadixMismatch {
        layer: usize,
        expected: i32,
        actual: i32,
    },
    #[error("layer {layer}: {kind} layer not supported by this operation")]
    WrongKind { layer: usize, kind: &'static str },
    #[error("layer {0}: power-of-two weights and fixed biases required")]
    MissingParams(usize),
    #[error("layer {0}: float weights and biases required")]
    MissingFloatParams(usize),
    #[error("input has {actual} values, network expects {expected}")]
    InputLength { expected: usize, actual: usize },
    #[error("invalid network: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("an ensemble needs at least one member")]
    EmptyEnsemble,
}

/// Wide accumulator register.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Accumulator {
    value: i64,
    frac: i32,
    width: u32,
}

impl Accumulator {
    pub fn new(frac: i32, width: u32) -> Self {
        debug_assert!((2..=63).contains(&width));
        Self {
            value: 0,
            frac,
            width,
        }
    }

    /// Empty accumulator for a layer reading inputs at fractional length `m`.
    pub fn for_input(m: i32, width: u32) -> Self {
        Self::new(m + WEIGHT_FRAC_BITS, width)
    }

    pub fn value(&self) -> i64 {
        self.value
    }

    pub fn frac(&self) -> i32 {
        self.frac
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    /// Largest magnitude the register holds.
    pub fn bound(&self) -> i64 {
        (1i64 << (self.width - 1)) - 1
    }

    /// True when the register sits at either rail.
    pub fn is_saturated(&self) -> bool {
        self.value.abs() >= self.bound()
    }

    #[inline]
    fn add(&mut self, term: i64) {
        let b = self.bound();
        self.value = (self.value + term).clamp(-b, b);
    }

    /// Accumulate `x · w` for a signed 8-bit input code.
    #[inline]
    pub fn mac(&mut self, x: i64, w: Po2Weight) {
        let shifted = x << (WEIGHT_FRAC_BITS + w.exponent() as i32);
        self.add(if w.is_negative() { -shifted } else { shifted });
    }

    /// Add a bias already expressed at this accumulator's fractional length.
    pub fn add_bias(&mut self, bias: i64) {
        self.add(bias);
    }
}

/// `acc + (s·x) << (7 + e)`. No rounding occurs.
pub fn shift_mac(mut acc: Accumulator, x: DfpValue, w: Po2Weight) -> Accumulator {
    debug_assert_eq!(acc.frac, x.format().frac() + WEIGHT_FRAC_BITS);
    acc.mac(x.to_int(), w);
    acc
}

/// Add the bias and route the sum onto `out`: one rounding, one saturation.
pub fn accumulate_route(
    mut acc: Accumulator,
    bias: i64,
    out: DfpFormat,
    rounding: RoundMode,
) -> DfpValue {
    acc.add_bias(bias);
    DfpValue::from_int(requantize_int(acc.value as i128, acc.frac, out, rounding), out)
}

/// Encode a real bias at accumulator fractional length `m + 7`, clamped to one fan-in slot.
pub fn encode_bias(b: f64, m: i32, rounding: RoundMode) -> i32 {
    let fmt = DfpFormat::new(32, m + WEIGHT_FRAC_BITS).expect("32-bit format");
    encode_int(b, fmt, rounding).clamp(-BIAS_LIMIT, BIAS_LIMIT) as i32
}

fn expect_shape(layer: usize, input: &DfpTensor, expected: Shape3) -> Result<(), EngineError> {
    let dims = input.shape();
    let ok = match dims.len() {
        3 => dims == expected.dims(),
        1 => dims[0] == expected.len() && expected.height == 1 && expected.width == 1,
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(EngineError::ShapeMismatch {
            layer,
            expected,
            actual: dims.to_vec(),
        })
    }
}

fn input_shape(t: &DfpTensor) -> Shape3 {
    match *t.shape() {
        [c, h, w] => Shape3::new(c, h, w),
        _ => Shape3::flat(t.len()),
    }
}

/// Convolution or fully connected layer over an input at `⟨8, m⟩`.
///
/// Every output is `accumulate_route` over `shift_mac` of its receptive
/// field, with zero padding. Output is `[C, H, W]` at `⟨8, n⟩`.
pub fn conv_forward(
    input: &DfpTensor,
    layer: &LayerSpec,
    width: u32,
    rounding: RoundMode,
) -> Result<DfpTensor, EngineError> {
    conv_forward_at(0, input, layer, width, rounding)
}

fn conv_forward_at(
    index: usize,
    input: &DfpTensor,
    layer: &LayerSpec,
    width: u32,
    rounding: RoundMode,
) -> Result<DfpTensor, EngineError> {
    if !layer.op.has_params() {
        return Err(EngineError::WrongKind {
            layer: index,
            kind: layer.op.kind(),
        });
    }
    if input.format().frac() != layer.m {
        return Err(EngineError::RadixMismatch {
            layer: index,
            expected: layer.m,
            actual: input.format().frac(),
        });
    }
    let (weights, bias) = match (layer.po2_weights(), layer.fixed_bias()) {
        (Some(w), Some(b)) => (w, b),
        _ => return Err(EngineError::MissingParams(index)),
    };
    let out_fmt = DfpFormat::q8(layer.n);
    let x = input.data();
    match layer.op {
        LayerOp::FullyConnected { inputs, outputs } => {
            if input.len() != inputs {
                return Err(EngineError::ShapeMismatch {
                    layer: index,
                    expected: Shape3::flat(inputs),
                    actual: input.shape().to_vec(),
                });
            }
            let data = (0..outputs)
                .map(|o| {
                    let mut acc = Accumulator::for_input(layer.m, width);
                    for (&xi, &w) in x.iter().zip(&weights[o * inputs..(o + 1) * inputs]) {
                        acc.mac(xi as i64, w);
                    }
                    accumulate_route(acc, bias[o] as i64, out_fmt, rounding).to_int() as i32
                })
                .collect();
            Ok(DfpTensor::from_parts_unchecked(vec![outputs, 1, 1], data, out_fmt))
        }
        LayerOp::Convolution {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
        } => {
            let in_shape = input_shape(input);
            let out_shape = layer
                .op
                .output_shape(in_shape)
                .map_err(|_| EngineError::ShapeMismatch {
                    layer: index,
                    expected: Shape3::new(in_channels, in_shape.height, in_shape.width),
                    actual: input.shape().to_vec(),
                })?;
            let (h, w) = (in_shape.height as isize, in_shape.width as isize);
            let kvol = in_channels * kernel_h * kernel_w;
            let mut data = Vec::with_capacity(out_shape.len());
            for o in 0..out_channels {
                let kernel = &weights[o * kvol..(o + 1) * kvol];
                for oy in 0..out_shape.height {
                    for ox in 0..out_shape.width {
                        let mut acc = Accumulator::for_input(layer.m, width);
                        let y0 = (oy * stride) as isize - padding as isize;
                        let x0 = (ox * stride) as isize - padding as isize;
                        for c in 0..in_channels {
                            for ky in 0..kernel_h {
                                let iy = y0 + ky as isize;
                                if iy < 0 || iy >= h {
                                    continue;
                                }
                                for kx in 0..kernel_w {
                                    let ix = x0 + kx as isize;
                                    if ix < 0 || ix >= w {
                                        continue;
                                    }
                                    let xi = x[(c * h as usize + iy as usize) * w as usize
                                        + ix as usize];
                                    acc.mac(xi as i64, kernel[(c * kernel_h + ky) * kernel_w + kx]);
                                }
                            }
                        }
                        data.push(
                            accumulate_route(acc, bias[o] as i64, out_fmt, rounding).to_int()
                                as i32,
                        );
                    }
                }
            }
            Ok(DfpTensor::from_parts_unchecked(
                out_shape.dims().to_vec(),
                data,
                out_fmt,
            ))
        }
        _ => Err(EngineError::WrongKind {
            layer: index,
            kind: layer.op.kind(),
        }),
    }
}

/// Max pooling keeps the input format; average pooling sums exactly and
/// rounds once onto `⟨8, n⟩`.
pub fn pool_forward(
    input: &DfpTensor,
    layer: &LayerSpec,
    rounding: RoundMode,
) -> Result<DfpTensor, EngineError> {
    pool_forward_at(0, input, layer, rounding)
}

fn pool_forward_at(
    index: usize,
    input: &DfpTensor,
    layer: &LayerSpec,
    rounding: RoundMode,
) -> Result<DfpTensor, EngineError> {
    let (kernel, stride, is_max) = match layer.op {
        LayerOp::MaxPool { kernel, stride } => (kernel, stride, true),
        LayerOp::AvgPool { kernel, stride } => (kernel, stride, false),
        _ => {
            return Err(EngineError::WrongKind {
                layer: index,
                kind: layer.op.kind(),
            })
        }
    };
    let in_shape = input_shape(input);
    let out_shape = layer
        .op
        .output_shape(in_shape)
        .map_err(|_| EngineError::ShapeMismatch {
            layer: index,
            expected: Shape3::new(in_shape.channels, kernel, kernel),
            actual: input.shape().to_vec(),
        })?;
    let in_fmt = input.format();
    let out_fmt = if is_max { in_fmt } else { DfpFormat::q8(layer.n) };
    let x = input.data();
    let (h, w) = (in_shape.height, in_shape.width);
    let window = (kernel * kernel) as i128;
    // avg = sum / k at frac m, moved to frac n
    let lift = out_fmt.frac() - in_fmt.frac();
    let mut data = Vec::with_capacity(out_shape.len());
    for c in 0..in_shape.channels {
        for oy in 0..out_shape.height {
            for ox in 0..out_shape.width {
                let cells = (0..kernel).flat_map(|ky| {
                    (0..kernel).map(move |kx| x[(c * h + oy * stride + ky) * w + ox * stride + kx])
                });
                let v = if is_max {
                    cells.max().expect("non-empty window") as i64
                } else {
                    let sum: i128 = cells.map(i128::from).sum();
                    let (num, den) = if lift >= 0 {
                        (sum << lift, window)
                    } else {
                        (sum, window << (-lift))
                    };
                    out_fmt.saturate(rounding.div(num, den) as i64)
                };
                data.push(v as i32);
            }
        }
    }
    Ok(DfpTensor::from_parts_unchecked(
        out_shape.dims().to_vec(),
        data,
        out_fmt,
    ))
}

pub fn relu_forward(input: &DfpTensor) -> DfpTensor {
    DfpTensor::from_parts_unchecked(
        input.shape().to_vec(),
        input.data().iter().map(|&v| v.max(0)).collect(),
        input.format(),
    )
}

fn check_valid(net: &NetworkDef) -> Result<(), EngineError> {
    let violations = validate_graph(net);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(EngineError::Invalid(violations))
    }
}

/// Run an mf_dfp network on an already encoded input.
pub fn forward_dfp(
    net: &NetworkDef,
    input: DfpTensor,
    rounding: RoundMode,
) -> Result<DfpTensor, EngineError> {
    let width = net.accumulator_width();
    let shapes = net.layer_shapes().map_err(|(i, _)| EngineError::ShapeMismatch {
        layer: i,
        expected: net.input_shape,
        actual: input.shape().to_vec(),
    })?;
    let mut x = input;
    for (i, layer) in net.layers.iter().enumerate() {
        expect_shape(i, &x, shapes[i])?;
        x = match layer.op {
            LayerOp::Convolution { .. } | LayerOp::FullyConnected { .. } => {
                conv_forward_at(i, &x, layer, width, rounding)?
            }
            LayerOp::MaxPool { .. } | LayerOp::AvgPool { .. } => {
                pool_forward_at(i, &x, layer, rounding)?
            }
            LayerOp::Relu => relu_forward(&x),
        };
    }
    Ok(x)
}

/// Encode a real input at the first layer's `⟨8, m⟩`.
pub fn encode_input(net: &NetworkDef, input: &[f64], rounding: RoundMode) -> Result<DfpTensor, EngineError> {
    if input.len() != net.input_shape.len() {
        return Err(EngineError::InputLength {
            expected: net.input_shape.len(),
            actual: input.len(),
        });
    }
    let m = net.layers.first().map_or(0, |l| l.m);
    DfpTensor::from_reals(
        net.input_shape.dims().to_vec(),
        input,
        DfpFormat::q8(m),
        rounding,
    )
    .map_err(|_| EngineError::InputLength {
        expected: net.input_shape.len(),
        actual: input.len(),
    })
}

/// Logits of `net` on one real-valued input (flattened CHW).
pub fn predict(net: &NetworkDef, input: &[f64]) -> Result<Vec<f64>, EngineError> {
    check_valid(net)?;
    predict_unchecked(net, input)
}

/// `predict` for a network the caller has already validated.
pub fn predict_unchecked(net: &NetworkDef, input: &[f64]) -> Result<Vec<f64>, EngineError> {
    match net.precision {
        Precision::Float32 => float_forward(net, input),
        Precision::MfDfp => {
            let rounding = RoundMode::default();
            let x = encode_input(net, input, rounding)?;
            Ok(forward_dfp(net, x, rounding)?.to_reals())
        }
    }
}

/// Reference forward pass of a float32 network, evaluated in f64.
pub fn float_forward(net: &NetworkDef, input: &[f64]) -> Result<Vec<f64>, EngineError> {
    Ok(float_forward_trace(net, input)?.pop().unwrap_or_default())
}

/// Activations at every layer boundary, network input first.
pub fn float_forward_trace(net: &NetworkDef, input: &[f64]) -> Result<Vec<Vec<f64>>, EngineError> {
    if input.len() != net.input_shape.len() {
        return Err(EngineError::InputLength {
            expected: net.input_shape.len(),
            actual: input.len(),
        });
    }
    let mut trace = vec![input.to_vec()];
    let mut shape = net.input_shape;
    for (i, layer) in net.layers.iter().enumerate() {
        let x = trace.last().expect("input pushed");
        let out = layer
            .op
            .output_shape(shape)
            .map_err(|_| EngineError::ShapeMismatch {
                layer: i,
                expected: shape,
                actual: vec![x.len()],
            })?;
        let y = match layer.op {
            LayerOp::Convolution { .. } | LayerOp::FullyConnected { .. } => {
                let (w, b) = match (layer.float_weights(), layer.float_bias()) {
                    (Some(w), Some(b)) => (w, b),
                    _ => return Err(EngineError::MissingFloatParams(i)),
                };
                float_affine(&layer.op, shape, x, |k| w[k] as f64, |o| b[o] as f64)
            }
            LayerOp::MaxPool { kernel, stride } => {
                float_pool(shape, x, kernel, stride, |cells| {
                    cells.fold(f64::NEG_INFINITY, f64::max)
                })
            }
            LayerOp::AvgPool { kernel, stride } => {
                float_pool(shape, x, kernel, stride, |cells| {
                    cells.sum::<f64>() / (kernel * kernel) as f64
                })
            }
            LayerOp::Relu => x.iter().map(|v| v.max(0.0)).collect(),
        };
        trace.push(y);
        shape = out;
    }
    Ok(trace)
}

/// `y = b + Σ x·w` for a convolution or fully connected layer, CHW layout.
pub(crate) fn float_affine(
    op: &LayerOp,
    shape: Shape3,
    x: &[f64],
    weight: impl Fn(usize) -> f64,
    bias: impl Fn(usize) -> f64,
) -> Vec<f64> {
    match *op {
        LayerOp::FullyConnected { inputs, outputs } => (0..outputs)
            .map(|o| {
                bias(o)
                    + x.iter()
                        .enumerate()
                        .map(|(i, xi)| xi * weight(o * inputs + i))
                        .sum::<f64>()
            })
            .collect(),
        LayerOp::Convolution {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
        } => {
            let out = op.output_shape(shape).expect("validated shape");
            let (h, w) = (shape.height as isize, shape.width as isize);
            let kvol = in_channels * kernel_h * kernel_w;
            let mut y = Vec::with_capacity(out.len());
            for o in 0..out_channels {
                for oy in 0..out.height {
                    for ox in 0..out.width {
                        let mut acc = bias(o);
                        for c in 0..in_channels {
                            for ky in 0..kernel_h {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h {
                                    continue;
                                }
                                for kx in 0..kernel_w {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= w {
                                        continue;
                                    }
                                    acc += x[(c * h as usize + iy as usize) * w as usize
                                        + ix as usize]
                                        * weight(o * kvol + (c * kernel_h + ky) * kernel_w + kx);
                                }
                            }
                        }
                        y.push(acc);
                    }
                }
            }
            y
        }
        _ => unreachable!("affine on a parameterless layer"),
    }
}

pub(crate) fn float_pool(
    shape: Shape3,
    x: &[f64],
    kernel: usize,
    stride: usize,
    reduce: impl Fn(&mut dyn Iterator<Item = f64>) -> f64,
) -> Vec<f64> {
    let oh = (shape.height - kernel) / stride + 1;
    let ow = (shape.width - kernel) / stride + 1;
    let (h, w) = (shape.height, shape.width);
    let mut y = Vec::with_capacity(shape.channels * oh * ow);
    for c in 0..shape.channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut cells = (0..kernel).flat_map(|ky| {
                    (0..kernel).map(move |kx| x[(c * h + oy * stride + ky) * w + ox * stride + kx])
                });
                y.push(reduce(&mut cells));
            }
        }
    }
    y
}

/// Index of the largest element; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    pub class: usize,
    pub avg_logits: Vec<f64>,
}

/// Average member logits and pick the largest.
pub fn ensemble_predict(
    members: &[NetworkDef],
    input: &[f64],
) -> Result<EnsemblePrediction, EngineError> {
    if members.is_empty() {
        return Err(EngineError::EmptyEnsemble);
    }
    let logits = members
        .iter()
        .map(|net| predict(net, input))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(average_logits(&logits))
}

pub fn average_logits(logits: &[Vec<f64>]) -> EnsemblePrediction {
    let n = logits[0].len();
    let m = logits.len() as f64;
    let avg_logits: Vec<f64> = (0..n)
        .map(|k| logits.iter().map(|z| z[k]).sum::<f64>() / m)
        .collect();
    EnsemblePrediction {
        class: argmax(&avg_logits),
        avg_logits,
    }
}
