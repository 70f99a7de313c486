//! A small reverse-mode differentiation tape over flat `f64` tensors.
//!
//! Nodes are appended in evaluation order; `backward` walks them in reverse
//! and returns the gradient of a scalar output with respect to every node.
//! The op set covers what the toy networks trained here need.

use crate::dfp::{encode_int, DfpFormat, RoundMode};
use crate::graph::{LayerOp, Shape3};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Exp(Var),
    Ln(Var),
    Relu(Var),
    Affine {
        x: Var,
        w: Var,
        b: Var,
        op: LayerOp,
        shape: Shape3,
    },
    MaxPool {
        x: Var,
        winners: Vec<usize>,
    },
    AvgPool {
        x: Var,
        shape: Shape3,
        kernel: usize,
        stride: usize,
    },
    /// Forward rounds onto a fixed-point grid; backward passes the gradient through.
    Quantize(Var),
    /// `H(target, softmax(z / τ))`.
    SoftmaxCrossEntropy {
        logits: Var,
        target: Vec<f64>,
        temperature: f64,
    },
    /// A scalar loss whose gradient with respect to `logits` is supplied by the caller.
    LogitLoss { logits: Var, grad: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node on the tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> &[f64] {
        &self.grads[v.0]
    }

    pub fn take(&mut self, v: Var) -> Vec<f64> {
        std::mem::take(&mut self.grads[v.0])
    }
}

fn visit_taps(op: &LayerOp, shape: Shape3, mut f: impl FnMut(usize, usize, usize, usize)) {
    // f(output index, input index, weight index, output channel)
    match *op {
        LayerOp::FullyConnected { inputs, outputs } => {
            for o in 0..outputs {
                for i in 0..inputs {
                    f(o, i, o * inputs + i, o);
                }
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
            let out = op.output_shape(shape).expect("shape checked by caller");
            let (h, w) = (shape.height as isize, shape.width as isize);
            let kvol = in_channels * kernel_h * kernel_w;
            for o in 0..out_channels {
                for oy in 0..out.height {
                    for ox in 0..out.width {
                        let oi = (o * out.height + oy) * out.width + ox;
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
                                    let ii = (c * h as usize + iy as usize) * w as usize + ix as usize;
                                    f(oi, ii, o * kvol + (c * kernel_h + ky) * kernel_w + kx, o);
                                }
                            }
                        }
                    }
                }
            }
        }
        _ => unreachable!("affine on a parameterless layer"),
    }
}

fn pool_windows(shape: Shape3, kernel: usize, stride: usize) -> Vec<Vec<usize>> {
    let oh = (shape.height - kernel) / stride + 1;
    let ow = (shape.width - kernel) / stride + 1;
    let (h, w) = (shape.height, shape.width);
    let mut out = Vec::with_capacity(shape.channels * oh * ow);
    for c in 0..shape.channels {
        for oy in 0..oh {
            for ox in 0..ow {
                out.push(
                    (0..kernel)
                        .flat_map(|ky| {
                            (0..kernel).map(move |kx| (c * h + oy * stride + ky) * w + ox * stride + kx)
                        })
                        .collect(),
                );
            }
        }
    }
    out
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(value, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * c).collect();
        self.push(value, Op::Scale(a, c))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = vec![self.value(a).iter().sum()];
        self.push(value, Op::Sum(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|x| x.exp()).collect();
        self.push(value, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|x| x.ln()).collect();
        self.push(value, Op::Ln(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|x| x.max(0.0)).collect();
        self.push(value, Op::Relu(a))
    }

    /// `y = b + Σ x·w` for a convolution or fully connected `op` over CHW input `shape`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var, op: LayerOp, shape: Shape3) -> Var {
        let out = op.output_shape(shape).expect("affine input shape");
        let bias = self.value(b);
        let per_channel = out.height * out.width;
        let mut y: Vec<f64> = (0..out.len()).map(|i| bias[i / per_channel]).collect();
        let (xv, wv) = (self.value(x), self.value(w));
        visit_taps(&op, shape, |oi, ii, wi, _| y[oi] += xv[ii] * wv[wi]);
        self.push(y, Op::Affine { x, w, b, op, shape })
    }

    pub fn max_pool(&mut self, x: Var, shape: Shape3, kernel: usize, stride: usize) -> Var {
        let xv = self.value(x);
        let winners: Vec<usize> = pool_windows(shape, kernel, stride)
            .into_iter()
            .map(|win| {
                // first maximal element wins, matching the integer engine
                let mut best = win[0];
                for &i in &win[1..] {
                    if xv[i] > xv[best] {
                        best = i;
                    }
                }
                best
            })
            .collect();
        let value = winners.iter().map(|&i| xv[i]).collect();
        self.push(value, Op::MaxPool { x, winners })
    }

    pub fn avg_pool(&mut self, x: Var, shape: Shape3, kernel: usize, stride: usize) -> Var {
        let xv = self.value(x);
        let area = (kernel * kernel) as f64;
        let value = pool_windows(shape, kernel, stride)
            .iter()
            .map(|win| win.iter().map(|&i| xv[i]).sum::<f64>() / area)
            .collect();
        self.push(
            value,
            Op::AvgPool {
                x,
                shape,
                kernel,
                stride,
            },
        )
    }

    /// Round onto `fmt` (with saturation) in the forward pass, identity in the backward pass.
    pub fn quantize(&mut self, x: Var, fmt: DfpFormat, rounding: RoundMode) -> Var {
        let ulp = fmt.ulp();
        let value = self
            .value(x)
            .iter()
            .map(|&v| encode_int(v, fmt, rounding) as f64 * ulp)
            .collect();
        self.push(value, Op::Quantize(x))
    }

    /// Cross entropy `H(target, softmax(logits / τ))`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: Vec<f64>, temperature: f64) -> Var {
        let z: Vec<f64> = self.value(logits).iter().map(|v| v / temperature).collect();
        let lse = log_sum_exp(&z);
        let loss = -target.iter().zip(&z).map(|(p, zi)| p * (zi - lse)).sum::<f64>();
        self.push(
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                temperature,
            },
        )
    }

    /// Scalar `loss` whose gradient with respect to `logits` is `grad`.
    pub fn logit_loss(&mut self, logits: Var, loss: f64, grad: Vec<f64>) -> Var {
        debug_assert_eq!(grad.len(), self.value(logits).len());
        self.push(vec![loss], Op::LogitLoss { logits, grad })
    }

    /// Gradients of the scalar node `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Gradients {
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        grads[out.0] = vec![1.0; self.nodes[out.0].value.len()];
        for idx in (0..=out.0).rev() {
            let g = std::mem::take(&mut grads[idx]);
            if g.iter().all(|v| *v == 0.0) {
                grads[idx] = g;
                continue;
            }
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(&mut grads[a.0], &g);
                    acc(&mut grads[b.0], &g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga: Vec<f64> = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                    let gb: Vec<f64> = g.iter().zip(av).map(|(g, a)| g * a).collect();
                    acc(&mut grads[a.0], &ga);
                    acc(&mut grads[b.0], &gb);
                }
                Op::Scale(a, c) => {
                    for (d, gi) in grads[a.0].iter_mut().zip(&g) {
                        *d += gi * c;
                    }
                }
                Op::Sum(a) => {
                    for d in grads[a.0].iter_mut() {
                        *d += g[0];
                    }
                }
                Op::Exp(a) => {
                    for ((d, gi), y) in grads[a.0].iter_mut().zip(&g).zip(&node.value) {
                        *d += gi * y;
                    }
                }
                Op::Ln(a) => {
                    let av = &self.nodes[a.0].value;
                    for ((d, gi), x) in grads[a.0].iter_mut().zip(&g).zip(av) {
                        *d += gi / x;
                    }
                }
                Op::Relu(a) => {
                    let av = &self.nodes[a.0].value;
                    for ((d, gi), x) in grads[a.0].iter_mut().zip(&g).zip(av) {
                        if *x > 0.0 {
                            *d += gi;
                        }
                    }
                }
                Op::Affine { x, w, b, op, shape } => {
                    let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                    let mut gx = vec![0.0; xv.len()];
                    let mut gw = vec![0.0; wv.len()];
                    let mut gb = vec![0.0; self.nodes[b.0].value.len()];
                    let per_channel = g.len() / gb.len();
                    for (oi, gi) in g.iter().enumerate() {
                        gb[oi / per_channel] += gi;
                    }
                    visit_taps(op, *shape, |oi, ii, wi, _| {
                        gx[ii] += g[oi] * wv[wi];
                        gw[wi] += g[oi] * xv[ii];
                    });
                    acc(&mut grads[x.0], &gx);
                    acc(&mut grads[w.0], &gw);
                    acc(&mut grads[b.0], &gb);
                }
                Op::MaxPool { x, winners } => {
                    for (gi, &src) in g.iter().zip(winners) {
                        grads[x.0][src] += gi;
                    }
                }
                Op::AvgPool {
                    x,
                    shape,
                    kernel,
                    stride,
                } => {
                    let area = (kernel * kernel) as f64;
                    for (gi, win) in g.iter().zip(pool_windows(*shape, *kernel, *stride)) {
                        for i in win {
                            grads[x.0][i] += gi / area;
                        }
                    }
                }
                Op::Quantize(a) => acc(&mut grads[a.0], &g),
                Op::SoftmaxCrossEntropy {
                    logits,
                    target,
                    temperature,
                } => {
                    let z: Vec<f64> = self.nodes[logits.0]
                        .value
                        .iter()
                        .map(|v| v / temperature)
                        .collect();
                    let lse = log_sum_exp(&z);
                    let mass: f64 = target.iter().sum();
                    for ((d, zi), p) in grads[logits.0].iter_mut().zip(&z).zip(target) {
                        *d += g[0] * (mass * (zi - lse).exp() - p) / temperature;
                    }
                }
                Op::LogitLoss { logits, grad } => {
                    for (d, gi) in grads[logits.0].iter_mut().zip(grad) {
                        *d += g[0] * gi;
                    }
                }
            }
            grads[idx] = g;
        }
        Gradients { grads }
    }
}

fn acc(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
