//! Shared fixtures: reference topologies, random layers and an exact-rational
//! reference for shift-accumulate layers.
#![allow(dead_code)]

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mfdfp::dfp::{DfpFormat, DfpTensor};
use mfdfp::engine::BIAS_LIMIT;
use mfdfp::graph::{Bias, LayerOp, LayerSpec, NetworkDef, Precision, Shape3, Weights};
use mfdfp::po2::Po2Weight;

/// AlexNet with ungrouped convolutions and no normalization layers.
pub fn alexnet() -> NetworkDef {
    NetworkDef::new(
        Shape3::new(3, 227, 227),
        Precision::Float32,
        vec![
            LayerSpec::conv("conv1", 3, 96, 11, 4, 0),
            LayerSpec::relu("relu1"),
            LayerSpec::max_pool("pool1", 3, 2),
            LayerSpec::conv("conv2", 96, 256, 5, 1, 2),
            LayerSpec::relu("relu2"),
            LayerSpec::max_pool("pool2", 3, 2),
            LayerSpec::conv("conv3", 256, 384, 3, 1, 1),
            LayerSpec::relu("relu3"),
            LayerSpec::conv("conv4", 384, 384, 3, 1, 1),
            LayerSpec::relu("relu4"),
            LayerSpec::conv("conv5", 384, 256, 3, 1, 1),
            LayerSpec::relu("relu5"),
            LayerSpec::max_pool("pool5", 3, 2),
            LayerSpec::fc("fc6", 9216, 4096),
            LayerSpec::relu("relu6"),
            LayerSpec::fc("fc7", 4096, 4096),
            LayerSpec::relu("relu7"),
            LayerSpec::fc("fc8", 4096, 1000),
        ],
    )
}

/// The small CIFAR-10 network with normalization layers removed.
pub fn cifar10_full() -> NetworkDef {
    NetworkDef::new(
        Shape3::new(3, 32, 32),
        Precision::Float32,
        vec![
            LayerSpec::conv("conv1", 3, 32, 5, 1, 2),
            LayerSpec::max_pool("pool1", 2, 2),
            LayerSpec::relu("relu1"),
            LayerSpec::conv("conv2", 32, 32, 5, 1, 2),
            LayerSpec::relu("relu2"),
            LayerSpec::avg_pool("pool2", 2, 2),
            LayerSpec::conv("conv3", 32, 64, 5, 1, 2),
            LayerSpec::relu("relu3"),
            LayerSpec::avg_pool("pool3", 2, 2),
            LayerSpec::fc("ip1", 1024, 10),
        ],
    )
}

/// A 3-layer fully connected classifier.
pub fn toy_mlp(features: usize, hidden: usize, classes: usize) -> NetworkDef {
    NetworkDef::new(
        Shape3::flat(features),
        Precision::Float32,
        vec![
            LayerSpec::fc("fc1", features, hidden),
            LayerSpec::relu("relu1"),
            LayerSpec::fc("fc2", hidden, hidden),
            LayerSpec::relu("relu2"),
            LayerSpec::fc("fc3", hidden, classes),
        ],
    )
}

/// A randomly shaped conv or fc layer with po2 weights, fixed biases and a matching input.
pub struct RandomLayer {
    pub input: DfpTensor,
    pub layer: LayerSpec,
}

fn random_weight(rng: &mut ChaCha8Rng) -> Po2Weight {
    Po2Weight::new(rng.random_bool(0.5), -(rng.random_range(0..=7) as i8)).unwrap()
}

fn random_code(rng: &mut ChaCha8Rng) -> i32 {
    match rng.random_range(0..10) {
        0 => 127,
        1 => -127,
        2 => 0,
        _ => rng.random_range(-127..=127),
    }
}

pub fn random_layer(rng: &mut ChaCha8Rng) -> RandomLayer {
    let m = rng.random_range(-3..=9);
    let n = rng.random_range(-3..=9);
    let (op, shape) = if rng.random_bool(0.5) {
        let inputs = rng.random_range(1..=64);
        let outputs = rng.random_range(1..=8);
        (LayerOp::FullyConnected { inputs, outputs }, Shape3::flat(inputs))
    } else {
        let in_channels = rng.random_range(1..=4);
        let out_channels = rng.random_range(1..=4);
        let kernel_h = rng.random_range(1..=3);
        let kernel_w = rng.random_range(1..=3);
        let padding = rng.random_range(0..=1);
        let stride = rng.random_range(1..=2);
        let h = rng.random_range(kernel_h.max(2)..=7);
        let w = rng.random_range(kernel_w.max(2)..=7);
        (
            LayerOp::Convolution {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
            },
            Shape3::new(in_channels, h, w),
        )
    };
    let (nw, nb) = op.param_counts();
    let weights = (0..nw).map(|_| random_weight(rng)).collect();
    let limit = BIAS_LIMIT as i32;
    let bias = (0..nb)
        .map(|_| match rng.random_range(0..6) {
            0 => limit,
            1 => -limit,
            _ => rng.random_range(-limit..=limit),
        })
        .collect();
    let layer = LayerSpec::new("rand", op)
        .with_radix(m, n)
        .with_params(Weights::Po2(weights), Bias::Fixed(bias));
    let data = (0..shape.len()).map(|_| random_code(rng)).collect();
    let input = DfpTensor::new(shape.dims().to_vec(), data, DfpFormat::q8(m)).unwrap();
    RandomLayer { input, layer }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn two_pow(e: i32) -> BigRational {
    let p = BigRational::from_integer(BigInt::one() << e.unsigned_abs());
    if e >= 0 {
        p
    } else {
        p.recip()
    }
}

/// Round half away from zero, then clamp to the signed 8-bit code range.
fn round_to_code(v: &BigRational) -> i32 {
    let half = BigRational::new(BigInt::one(), BigInt::from(2));
    let mag = (v.abs() + half).floor().to_integer();
    let mag = if mag > BigInt::from(127) { 127 } else { i32::try_from(mag).unwrap() };
    if v.is_negative() {
        -mag
    } else {
        mag
    }
}

/// Exact real-valued layer output, rounded once to `⟨8, n⟩` codes.
pub fn rational_reference(input: &DfpTensor, layer: &LayerSpec) -> Vec<i32> {
    let m = layer.m;
    let x_scale = two_pow(-m);
    let b_scale = two_pow(-(m + 7));
    let out_scale = two_pow(layer.n);
    let x: Vec<BigRational> = input
        .data()
        .iter()
        .map(|&c| BigRational::from_integer(BigInt::from(c)) * &x_scale)
        .collect();
    let w: Vec<BigRational> = layer
        .po2_weights()
        .unwrap()
        .iter()
        .map(|w| {
            let v = two_pow(w.exponent() as i32);
            if w.is_negative() {
                -v
            } else {
                v
            }
        })
        .collect();
    let b: Vec<BigRational> = layer
        .fixed_bias()
        .unwrap()
        .iter()
        .map(|&v| BigRational::from_integer(BigInt::from(v)) * &b_scale)
        .collect();
    let dims = input.shape();
    let mut out = Vec::new();
    match layer.op {
        LayerOp::FullyConnected { inputs, outputs } => {
            for o in 0..outputs {
                let mut acc = b[o].clone();
                for i in 0..inputs {
                    acc += &x[i] * &w[o * inputs + i];
                }
                out.push(round_to_code(&(acc * &out_scale)));
            }
        }
        LayerOp::Convolution {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
        } => {
            let (h, wd) = (dims[1] as i64, dims[2] as i64);
            let oh = (h + 2 * padding as i64 - kernel_h as i64) / stride as i64 + 1;
            let ow = (wd + 2 * padding as i64 - kernel_w as i64) / stride as i64 + 1;
            for (o, bias) in b.iter().enumerate().take(out_channels) {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.clone();
                        for c in 0..in_channels {
                            for ky in 0..kernel_h {
                                for kx in 0..kernel_w {
                                    let iy = oy * stride as i64 + ky as i64 - padding as i64;
                                    let ix = ox * stride as i64 + kx as i64 - padding as i64;
                                    if iy < 0 || ix < 0 || iy >= h || ix >= wd {
                                        continue;
                                    }
                                    let xi = (c as i64 * h + iy) * wd + ix;
                                    let wi = ((o * in_channels + c) * kernel_h + ky) * kernel_w + kx;
                                    acc += &x[xi as usize] * &w[wi];
                                }
                            }
                        }
                        out.push(round_to_code(&(acc * &out_scale)));
                    }
                }
            }
        }
        _ => panic!("reference covers conv and fc layers only"),
    }
    out
}
