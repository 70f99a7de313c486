//! Shadow-weight fine-tuning of MF-DFP networks, teacher distillation and
//! ensemble construction.
//!
//! A [`TrainState`] keeps full-precision shadow parameters next to the
//! deployable network derived from them. Forward passes run on the deployable
//! network with activations rounded exactly as the integer engine rounds them;
//! gradients flow through the rounding unchanged and update the shadow copy.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::convert::{quantize_8bit, ConvertError};
use crate::data::{extract_teacher_logits, DataError, Dataset, TeacherLogits};
use crate::dfp::{pow2, DfpFormat, RoundMode};
use crate::distill::{
    cross_entropy_logits, distill_grad_approx, distill_grad_exact, distill_loss, one_hot, DistillError,
};
use crate::engine::{argmax, encode_bias, predict_unchecked, EngineError};
use crate::graph::{
    validate_graph, Bias, EnsembleDef, EnsembleError, LayerOp, NetworkDef, Precision, Weights,
};
use crate::po2::{dequantize_po2, quantize_po2, Po2Error};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss {loss} on sample {sample} at learning rate {learning_rate}")]
    NonFinite {
        sample: usize,
        loss: f64,
        learning_rate: f64,
    },
    #[error("network: {0}")]
    Network(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("no teacher logits for sample {0}")]
    MissingTeacher(usize),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Convert(#[from] ConvertError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Po2(#[from] Po2Error),
}

/// Which logit gradient the distillation phase uses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    #[default]
    Exact,
    Approx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Factor applied to the learning rate when validation loss plateaus.
    pub lr_decay: f64,
    /// Training stops once the learning rate decays below this.
    pub min_learning_rate: f64,
    /// Epochs without validation improvement before the learning rate decays.
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub beta: f64,
    pub gradient: GradientMode,
    /// Distillation starts this many epochs before the best quantized checkpoint.
    pub rewind_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            momentum: 0.9,
            lr_decay: 0.1,
            min_learning_rate: 1e-7,
            patience: 2,
            max_epochs: 30,
            batch_size: 16,
            tau: 20.0,
            beta: 0.2,
            gradient: GradientMode::Exact,
            rewind_epochs: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::Config(msg.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return bad("lr_decay must lie in (0, 1)");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

/// Shadow parameters of one convolution or fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerParams {
    fn zeros_like(&self) -> Self {
        Self {
            weights: vec![0.0; self.weights.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Shadow parameters, `None` for parameterless layers.
    pub float_weights: Vec<Option<LayerParams>>,
    velocity: Vec<Option<LayerParams>>,
    /// Deployable network derived from the shadow parameters.
    pub network: NetworkDef,
    pub config: TrainConfig,
    pub learning_rate: f64,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    /// Mean loss of the most recent step.
    pub last_loss: f64,
}

fn shadow_of(float_net: &NetworkDef) -> Result<Vec<Option<LayerParams>>, TrainError> {
    float_net
        .layers
        .iter()
        .map(|l| {
            if !l.op.has_params() {
                return Ok(None);
            }
            match (l.float_weights(), l.float_bias()) {
                (Some(w), Some(b)) => Ok(Some(LayerParams {
                    weights: w.iter().map(|&v| v as f64).collect(),
                    bias: b.iter().map(|&v| v as f64).collect(),
                })),
                _ => Err(TrainError::Network(format!("layer {} lacks float parameters", l.name))),
            }
        })
        .collect()
}

impl TrainState {
    /// Train `network` directly, with shadow parameters copied from `source`.
    fn build(source: &NetworkDef, network: NetworkDef, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        if !source.same_topology(&network) {
            return Err(TrainError::Network("float and quantized topologies differ".into()));
        }
        let float_weights = shadow_of(source)?;
        let velocity = float_weights
            .iter()
            .map(|p| p.as_ref().map(LayerParams::zeros_like))
            .collect();
        let mut state = Self {
            float_weights,
            velocity,
            network,
            learning_rate: config.learning_rate,
            config,
            phase1_epochs: 0,
            phase2_epochs: 0,
            last_loss: f64::NAN,
        };
        state.sync()?;
        let violations = validate_graph(&state.network);
        if !violations.is_empty() {
            return Err(EngineError::Invalid(violations).into());
        }
        Ok(state)
    }

    /// State for ordinary float training.
    pub fn float(float_net: &NetworkDef, config: TrainConfig) -> Result<Self, TrainError> {
        if float_net.precision != Precision::Float32 {
            return Err(TrainError::Network("expected a float32 network".into()));
        }
        Self::build(float_net, float_net.clone(), config)
    }

    /// State for fine-tuning `quantized`, shadowed by the weights of `float_net`.
    pub fn quantized(
        float_net: &NetworkDef,
        quantized: NetworkDef,
        config: TrainConfig,
    ) -> Result<Self, TrainError> {
        if quantized.precision != Precision::MfDfp {
            return Err(TrainError::Network("expected an mf_dfp network".into()));
        }
        Self::build(float_net, quantized, config)
    }

    /// Re-derive the deployable parameters from the shadow parameters.
    fn sync(&mut self) -> Result<(), Po2Error> {
        let precision = self.network.precision;
        let rounding = RoundMode::default();
        for (layer, p) in self.network.layers.iter_mut().zip(&self.float_weights) {
            let Some(p) = p else { continue };
            match precision {
                Precision::Float32 => {
                    layer.weights = Some(Weights::Float(p.weights.iter().map(|&v| v as f32).collect()));
                    layer.bias = Some(Bias::Float(p.bias.iter().map(|&v| v as f32).collect()));
                }
                Precision::MfDfp => {
                    layer.weights = Some(Weights::Po2(
                        p.weights.iter().map(|&v| quantize_po2(v)).collect::<Result<_, _>>()?,
                    ));
                    let m = layer.m;
                    layer.bias = Some(Bias::Fixed(p.bias.iter().map(|&v| encode_bias(v, m, rounding)).collect()));
                }
            }
        }
        Ok(())
    }

    /// Whether the deployable weights equal the quantized shadow weights.
    pub fn is_coupled(&self) -> bool {
        let mut probe = self.clone();
        probe.sync().is_ok() && probe.network == self.network
    }

    /// Build the training forward pass; returns the logits and each layer's parameter leaves.
    fn forward(&self, tape: &mut Tape, input: &[f64]) -> (Var, Vec<Option<(Var, Var)>>) {
        let quantized = self.network.precision == Precision::MfDfp;
        let rounding = RoundMode::default();
        let mut shape = self.network.input_shape;
        let mut x = tape.leaf(input.to_vec());
        if quantized {
            let m = self.network.layers.first().map_or(0, |l| l.m);
            x = tape.quantize(x, DfpFormat::q8(m), rounding);
        }
        let mut params = vec![None; self.network.layers.len()];
        for (i, layer) in self.network.layers.iter().enumerate() {
            let out_fmt = DfpFormat::q8(layer.n);
            let next = layer.op.output_shape(shape).expect("validated network");
            x = match layer.op {
                LayerOp::Convolution { .. } | LayerOp::FullyConnected { .. } => {
                    let (w, b) = if quantized {
                        let scale = pow2(-layer.accumulator_frac());
                        (
                            layer.po2_weights().expect("synced").iter().map(|&w| dequantize_po2(w)).collect(),
                            layer.fixed_bias().expect("synced").iter().map(|&b| b as f64 * scale).collect(),
                        )
                    } else {
                        let p = self.float_weights[i].as_ref().expect("shadow present");
                        (p.weights.clone(), p.bias.clone())
                    };
                    let (wv, bv) = (tape.leaf(w), tape.leaf(b));
                    params[i] = Some((wv, bv));
                    let y = tape.affine(x, wv, bv, layer.op, shape);
                    if quantized {
                        tape.quantize(y, out_fmt, rounding)
                    } else {
                        y
                    }
                }
                LayerOp::Relu => tape.relu(x),
                LayerOp::MaxPool { kernel, stride } => tape.max_pool(x, shape, kernel, stride),
                LayerOp::AvgPool { kernel, stride } => {
                    let y = tape.avg_pool(x, shape, kernel, stride);
                    if quantized {
                        tape.quantize(y, out_fmt, rounding)
                    } else {
                        y
                    }
                }
            };
            shape = next;
        }
        (x, params)
    }

    /// Logits of the training-time forward pass.
    pub fn logits(&self, input: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let (z, _) = self.forward(&mut tape, input);
        tape.value(z).to_vec()
    }

    /// Mean loss and mean shadow-parameter gradient over `batch`.
    fn batch_gradient(
        &self,
        data: &Dataset,
        batch: &[usize],
        teacher: Option<&TeacherLogits>,
    ) -> Result<(f64, Vec<Option<LayerParams>>), TrainError> {
        let mut grads: Vec<Option<LayerParams>> = self
            .float_weights
            .iter()
            .map(|p| p.as_ref().map(LayerParams::zeros_like))
            .collect();
        let mut total = 0.0;
        for &sample in batch {
            let mut tape = Tape::new();
            let (z, params) = self.forward(&mut tape, &data.inputs[sample]);
            let y = one_hot(data.labels[sample], data.classes);
            let loss = match teacher {
                None => tape.softmax_cross_entropy(z, y, 1.0),
                Some(t) => {
                    let z_t = t.logits.get(sample).ok_or(TrainError::MissingTeacher(sample))?;
                    let z_s = tape.value(z).to_vec();
                    let (tau, beta) = (self.config.tau, self.config.beta);
                    let value = distill_loss(&z_s, z_t, &y, tau, beta)?;
                    let grad = match self.config.gradient {
                        GradientMode::Exact => distill_grad_exact(&z_s, z_t, &y, tau, beta)?,
                        GradientMode::Approx => distill_grad_approx(&z_s, z_t, &y, beta, tau)?,
                    };
                    tape.logit_loss(z, value, grad)
                }
            };
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(TrainError::NonFinite {
                    sample,
                    loss: value,
                    learning_rate: self.learning_rate,
                });
            }
            total += value;
            let g = tape.backward(loss);
            for (acc, p) in grads.iter_mut().zip(&params) {
                if let (Some(acc), Some((w, b))) = (acc, p) {
                    add_into(&mut acc.weights, g.get(*w));
                    add_into(&mut acc.bias, g.get(*b));
                }
            }
        }
        let scale = 1.0 / batch.len() as f64;
        for p in grads.iter_mut().flatten() {
            p.weights.iter_mut().chain(p.bias.iter_mut()).for_each(|v| *v *= scale);
        }
        Ok((total * scale, grads))
    }

    /// Momentum SGD on the shadow parameters, then re-derive the network.
    fn apply(&mut self, grads: &[Option<LayerParams>]) -> Result<(), TrainError> {
        let (mu, lr) = (self.config.momentum, self.learning_rate);
        for ((w, v), g) in self.float_weights.iter_mut().zip(&mut self.velocity).zip(grads) {
            if let (Some(w), Some(v), Some(g)) = (w, v, g) {
                for ((wi, vi), gi) in w.weights.iter_mut().zip(&mut v.weights).zip(&g.weights) {
                    *vi = mu * *vi + gi;
                    *wi -= lr * *vi;
                }
                for ((wi, vi), gi) in w.bias.iter_mut().zip(&mut v.bias).zip(&g.bias) {
                    *vi = mu * *vi + gi;
                    *wi -= lr * *vi;
                }
            }
        }
        self.sync()?;
        Ok(())
    }

    fn step(mut self, data: &Dataset, batch: &[usize], teacher: Option<&TeacherLogits>) -> Result<Self, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let (loss, grads) = self.batch_gradient(data, batch, teacher)?;
        self.apply(&grads)?;
        self.last_loss = loss;
        Ok(self)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// One hard-label update over the samples of `data` at `batch`.
pub fn phase1_step(state: TrainState, data: &Dataset, batch: &[usize]) -> Result<TrainState, TrainError> {
    state.step(data, batch, None)
}

/// One distillation update; `teacher` is indexed like `data`.
pub fn phase2_step(
    state: TrainState,
    data: &Dataset,
    batch: &[usize],
    teacher: &TeacherLogits,
) -> Result<TrainState, TrainError> {
    state.step(data, batch, Some(teacher))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    /// Mean hard-label cross entropy.
    pub loss: f64,
    /// Fraction of samples classified correctly.
    pub accuracy: f64,
}

/// Evaluate a deployable network with the inference engine.
pub fn evaluate(net: &NetworkDef, data: &Dataset) -> Result<Evaluation, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (x, &label) in data.inputs.iter().zip(&data.labels) {
        let z = predict_unchecked(net, x)?;
        loss += cross_entropy_logits(&one_hot(label, z.len()), &z, 1.0);
        correct += usize::from(argmax(&z) == label);
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}

/// Accuracy of an ensemble's averaged logits.
pub fn ensemble_accuracy(ensemble: &EnsembleDef, data: &Dataset) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut correct = 0usize;
    for (x, &label) in data.inputs.iter().zip(&data.labels) {
        let logits = ensemble
            .members()
            .iter()
            .map(|m| predict_unchecked(m, x))
            .collect::<Result<Vec<_>, _>>()?;
        correct += usize::from(crate::engine::average_logits(&logits).class == label);
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub validation: Evaluation,
}

/// Outcome of one training phase.
#[derive(Debug, Clone)]
pub struct PhaseRun {
    /// State after each epoch; index 0 is the state before training.
    pub checkpoints: Vec<TrainState>,
    pub history: Vec<EpochRecord>,
    /// Index into `checkpoints` of the best validation result.
    pub best_epoch: usize,
}

impl PhaseRun {
    pub fn best(&self) -> &TrainState {
        &self.checkpoints[self.best_epoch]
    }

    pub fn final_state(&self) -> &TrainState {
        self.checkpoints.last().expect("initial checkpoint")
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Phase {
    Float,
    Quantized,
    Distill,
}

fn run_epochs(
    mut state: TrainState,
    train: &Dataset,
    val: &Dataset,
    teacher: Option<&TeacherLogits>,
    phase: Phase,
) -> Result<PhaseRun, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let salt = match phase {
        Phase::Float => 0x0f,
        Phase::Quantized => 0x01,
        Phase::Distill => 0x02,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(state.config.seed ^ (salt << 56));
    let initial = evaluate(&state.network, val)?;
    let mut best = (initial.accuracy, initial.loss);
    let mut best_epoch = 0;
    let mut plateau_best = initial.loss;
    let mut stale = 0;
    let mut checkpoints = vec![state.clone()];
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=state.config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(state.config.batch_size) {
            state = state.step(train, batch, teacher)?;
            loss_sum += state.last_loss * batch.len() as f64;
        }
        match phase {
            Phase::Distill => state.phase2_epochs += 1,
            _ => state.phase1_epochs += 1,
        }
        let validation = evaluate(&state.network, val)?;
        history.push(EpochRecord {
            epoch,
            learning_rate: state.learning_rate,
            train_loss: loss_sum / train.len() as f64,
            validation,
        });
        if validation.accuracy > best.0 || (validation.accuracy == best.0 && validation.loss < best.1) {
            best = (validation.accuracy, validation.loss);
            best_epoch = epoch;
        }
        if validation.loss < plateau_best * (1.0 - 1e-4) {
            plateau_best = validation.loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= state.config.patience {
                state.learning_rate *= state.config.lr_decay;
                stale = 0;
            }
        }
        checkpoints.push(state.clone());
        if state.learning_rate < state.config.min_learning_rate {
            break;
        }
    }
    Ok(PhaseRun {
        checkpoints,
        history,
        best_epoch,
    })
}

/// Float network with He-normal weights and zero biases on the topology of `net`.
pub fn init_float_network(net: &NetworkDef, seed: u64) -> NetworkDef {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = net.clone();
    out.precision = Precision::Float32;
    for layer in &mut out.layers {
        layer.m = 0;
        layer.n = 0;
        if !layer.op.has_params() {
            layer.weights = None;
            layer.bias = None;
            continue;
        }
        let (nw, nb) = layer.op.param_counts();
        let fan_in = layer.op.kernel_volume().max(1) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        layer.weights = Some(Weights::Float((0..nw).map(|_| normal.sample(&mut rng) as f32).collect()));
        layer.bias = Some(Bias::Float(vec![0.0; nb]));
    }
    out
}

/// Ordinary float training; a network without parameters is initialised from `config.seed`.
pub fn train_float(
    net: &NetworkDef,
    train: &Dataset,
    val: &Dataset,
    config: TrainConfig,
) -> Result<PhaseRun, TrainError> {
    let needs_init = net.precision != Precision::Float32
        || net.layers.iter().any(|l| l.op.has_params() && l.float_weights().is_none());
    let start = if needs_init {
        init_float_network(net, config.seed)
    } else {
        net.clone()
    };
    run_epochs(TrainState::float(&start, config)?, train, val, None, Phase::Float)
}

/// Hard-label fine-tuning of a quantized network.
pub fn run_phase1(state: TrainState, train: &Dataset, val: &Dataset) -> Result<PhaseRun, TrainError> {
    run_epochs(state, train, val, None, Phase::Quantized)
}

/// Distillation starting `rewind_epochs` before the best checkpoint of `phase1`.
pub fn run_phase2(
    phase1: &PhaseRun,
    train: &Dataset,
    val: &Dataset,
    teacher: &TeacherLogits,
) -> Result<PhaseRun, TrainError> {
    let start_idx = phase1.best_epoch.saturating_sub(phase1.best().config.rewind_epochs);
    let mut start = phase1.checkpoints[start_idx].clone();
    start.learning_rate = start.config.learning_rate;
    start.velocity.iter_mut().flatten().for_each(|v| *v = v.zeros_like());
    start.phase2_epochs = start.phase1_epochs;
    run_epochs(start, train, val, Some(teacher), Phase::Distill)
}

/// Both fine-tuning phases for one float base model.
#[derive(Debug, Clone)]
pub struct FineTuneRun {
    pub float_validation: Evaluation,
    pub quantized: NetworkDef,
    pub phase1: PhaseRun,
    pub phase2: PhaseRun,
}

impl FineTuneRun {
    /// Best distilled network.
    pub fn network(&self) -> &NetworkDef {
        &self.phase2.best().network
    }
}

/// Quantize `float_net` calibrated on the training inputs, then run both phases.
pub fn fine_tune(
    float_net: &NetworkDef,
    train: &Dataset,
    val: &Dataset,
    config: TrainConfig,
) -> Result<FineTuneRun, TrainError> {
    let float_validation = evaluate(float_net, val)?;
    let quantized = quantize_8bit(float_net, &train.inputs)?;
    let teacher = extract_teacher_logits(float_net, train, false)?;
    let state = TrainState::quantized(float_net, quantized.clone(), config)?;
    let phase1 = run_phase1(state, train, val)?;
    let phase2 = run_phase2(&phase1, train, val, &teacher)?;
    Ok(FineTuneRun {
        float_validation,
        quantized,
        phase1,
        phase2,
    })
}

#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub ensemble: EnsembleDef,
    pub members: Vec<FineTuneRun>,
}

/// Fine-tune every base model (in parallel, member `i` seeded with `seeds[i]`)
/// and collect the distilled networks.
pub fn build_ensemble(
    base_models: &[NetworkDef],
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<EnsembleRun, TrainError> {
    if base_models.is_empty() {
        return Err(EnsembleError::Empty.into());
    }
    if seeds.len() != base_models.len() {
        return Err(TrainError::Config(format!(
            "{} seeds for {} base models",
            seeds.len(),
            base_models.len()
        )));
    }
    if let Some(i) = base_models.iter().position(|m| !m.same_topology(&base_models[0])) {
        return Err(EnsembleError::TopologyMismatch(i).into());
    }
    let members: Vec<FineTuneRun> = std::thread::scope(|s| {
        let handles: Vec<_> = base_models
            .iter()
            .zip(seeds)
            .map(|(net, &seed)| {
                let cfg = TrainConfig { seed, ..config.clone() };
                s.spawn(move || fine_tune(net, train, val, cfg))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("fine-tuning thread panicked"))
            .collect::<Result<_, _>>()
    })?;
    let ensemble = EnsembleDef::new(members.iter().map(|m| m.network().clone()).collect())?;
    Ok(EnsembleRun { ensemble, members })
}
