//! Float → MF-DFP conversion: per-layer radix calibration and po2 weights.

use thiserror::Error;

use crate::dfp::{format_for_max_abs, DfpError, DfpFormat, RoundMode};
use crate::engine::{encode_bias, float_forward_trace, EngineError};
use crate::graph::{Bias, LayerOp, NetworkDef, Precision, Weights, ACTIVATION_BITS};
use crate::po2::{quantize_po2, Po2Error};

#[derive(Debug, Error)]
pub enum ConvertError {
    #[error("expected a float32 network")]
    NotFloat,
    #[error("calibration needs at least one sample")]
    EmptyCalibration,
    #[error("layer {layer}: activation format: {source}")]
    Format { layer: usize, source: DfpError },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Po2(#[from] Po2Error),
}

/// Fractional lengths at every layer boundary: index 0 is the network input,
/// index `i + 1` the output of layer `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub boundaries: Vec<DfpFormat>,
    /// Largest activation magnitude seen at each boundary.
    pub max_abs: Vec<f64>,
}

impl Calibration {
    /// `(m, n)` of layer `i`.
    pub fn radix(&self, i: usize) -> (i32, i32) {
        (self.boundaries[i].frac(), self.boundaries[i + 1].frac())
    }
}

/// Pick `⟨8, f⟩` for every boundary from the float network's activations.
///
/// Max pooling and ReLU never widen the range, so they inherit their input
/// format; every other layer is calibrated on its own outputs.
pub fn calibrate_network(
    float_net: &NetworkDef,
    samples: &[Vec<f64>],
) -> Result<Calibration, ConvertError> {
    if float_net.precision != Precision::Float32 {
        return Err(ConvertError::NotFloat);
    }
    if samples.is_empty() {
        return Err(ConvertError::EmptyCalibration);
    }
    let mut max_abs = vec![0f64; float_net.layers.len() + 1];
    for sample in samples {
        let trace = float_forward_trace(float_net, sample)?;
        for (slot, acts) in max_abs.iter_mut().zip(&trace) {
            *slot = acts.iter().fold(*slot, |m, v| m.max(v.abs()));
        }
    }
    let fmt = |i: usize| {
        format_for_max_abs(max_abs[i], ACTIVATION_BITS).map_err(|source| ConvertError::Format {
            layer: i.saturating_sub(1),
            source,
        })
    };
    let mut boundaries = vec![fmt(0)?];
    for (i, layer) in float_net.layers.iter().enumerate() {
        let next = match layer.op {
            LayerOp::MaxPool { .. } | LayerOp::Relu => boundaries[i],
            _ => fmt(i + 1)?,
        };
        boundaries.push(next);
    }
    Ok(Calibration {
        boundaries,
        max_abs,
    })
}

/// Build the mf_dfp network: po2 weights, fixed biases at `m + 7`, radix indices from `calib`.
pub fn quantize_network(
    float_net: &NetworkDef,
    calib: &Calibration,
) -> Result<NetworkDef, ConvertError> {
    if float_net.precision != Precision::Float32 {
        return Err(ConvertError::NotFloat);
    }
    let rounding = RoundMode::default();
    let mut net = float_net.clone();
    net.precision = Precision::MfDfp;
    for (i, layer) in net.layers.iter_mut().enumerate() {
        let (m, n) = calib.radix(i);
        layer.m = m;
        layer.n = n;
        if let Some(Weights::Float(w)) = &layer.weights {
            layer.weights = Some(Weights::Po2(
                w.iter()
                    .map(|&x| quantize_po2(x as f64))
                    .collect::<Result<_, _>>()?,
            ));
        }
        if let Some(Bias::Float(b)) = &layer.bias {
            layer.bias = Some(Bias::Fixed(
                b.iter().map(|&x| encode_bias(x as f64, m, rounding)).collect(),
            ));
        }
    }
    Ok(net)
}

/// Calibrate on `samples` and quantize in one step.
pub fn quantize_8bit(
    float_net: &NetworkDef,
    samples: &[Vec<f64>],
) -> Result<NetworkDef, ConvertError> {
    let calib = calibrate_network(float_net, samples)?;
    quantize_network(float_net, &calib)
}
