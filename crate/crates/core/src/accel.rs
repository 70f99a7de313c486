//! Analytical timing, energy and area model of the tile-based accelerator.
//!
//! One processing unit evaluates a tile of `neurons_per_pu` outputs times
//! `synapses_per_neuron` inputs per cycle. Pooling and ReLU are folded into
//! output routing and memory transfers overlap computation, so only
//! convolution and fully connected tiles cost cycles. Power is a constant per
//! design.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{LayerOp, NetworkDef};

#[derive(Debug, Error)]
pub enum AccelError {
    #[error("cycle count must be positive")]
    ZeroCycles,
    #[error("latency must be positive and finite, got {0}")]
    Latency(f64),
    #[error("baseline {0} must be positive")]
    Baseline(&'static str),
    #[error("invalid accelerator config: {0}")]
    Config(String),
    #[error("unknown design preset {0:?} (expected float32, mf_dfp or mf_dfp_ensemble2)")]
    UnknownPreset(String),
    #[error("network shape error at layer {layer}: {detail}")]
    Shape { layer: usize, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub design: String,
    pub neurons_per_pu: u64,
    pub synapses_per_neuron: u64,
    pub processing_units: u64,
    pub clock_hz: f64,
    pub design_power_mw: f64,
    pub design_area_mm2: f64,
}

impl SimConfig {
    fn preset(design: &str, processing_units: u64, power_mw: f64, area_mm2: f64) -> Self {
        Self {
            design: design.to_string(),
            neurons_per_pu: 16,
            synapses_per_neuron: 16,
            processing_units,
            clock_hz: 250e6,
            design_power_mw: power_mw,
            design_area_mm2: area_mm2,
        }
    }

    pub fn float32() -> Self {
        Self::preset("float32", 1, 1361.61, 16.52)
    }

    pub fn mf_dfp() -> Self {
        Self::preset("mf_dfp", 1, 138.96, 1.99)
    }

    /// Two MF-DFP processing units, one per ensemble member.
    pub fn mf_dfp_ensemble2() -> Self {
        Self::preset("mf_dfp_ensemble2", 2, 270.27, 3.96)
    }

    pub fn by_name(name: &str) -> Result<Self, AccelError> {
        match name {
            "float32" | "float" => Ok(Self::float32()),
            "mf_dfp" => Ok(Self::mf_dfp()),
            "mf_dfp_ensemble2" => Ok(Self::mf_dfp_ensemble2()),
            other => Err(AccelError::UnknownPreset(other.to_string())),
        }
    }

    pub fn validate(&self) -> Result<(), AccelError> {
        let bad = |m: &str| Err(AccelError::Config(m.to_string()));
        if self.neurons_per_pu == 0 || self.synapses_per_neuron == 0 || self.processing_units == 0 {
            return bad("tile dimensions and unit count must be positive");
        }
        if !(self.clock_hz > 0.0 && self.clock_hz.is_finite()) {
            return bad("clock_hz must be positive");
        }
        if !(self.design_power_mw >= 0.0 && self.design_area_mm2 >= 0.0) {
            return bad("power and area must be non-negative");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, AccelError> {
        let cfg: Self = toml::from_str(text).map_err(|e| AccelError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, AccelError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AccelError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

/// Cycles of one layer on an input of the given output-plane size.
fn layer_cycles(op: &LayerOp, output_positions: u64, cfg: &SimConfig) -> u64 {
    let (n, s) = (cfg.neurons_per_pu, cfg.synapses_per_neuron);
    match *op {
        LayerOp::Convolution { out_channels, .. } => {
            output_positions * (out_channels as u64).div_ceil(n) * (op.kernel_volume() as u64).div_ceil(s)
        }
        LayerOp::FullyConnected { inputs, outputs } => {
            (outputs as u64).div_ceil(n) * (inputs as u64).div_ceil(s)
        }
        _ => 0,
    }
}

/// Cycles for one forward pass of `net` on a single processing unit.
pub fn cycle_count(net: &NetworkDef, cfg: &SimConfig) -> Result<u64, AccelError> {
    let shapes = net
        .layer_shapes()
        .map_err(|(layer, detail)| AccelError::Shape { layer, detail })?;
    Ok(net
        .layers
        .iter()
        .zip(&shapes[1..])
        .map(|(layer, out)| layer_cycles(&layer.op, (out.height * out.width) as u64, cfg))
        .sum())
}

/// Cycles for `members` networks of `member_cycles` each, spread over the processing units.
pub fn ensemble_cycles(member_cycles: u64, members: u64, cfg: &SimConfig) -> u64 {
    members.div_ceil(cfg.processing_units) * member_cycles
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub design: String,
    /// Clock cycles; fractional when the report was built from a measured latency.
    pub cycles: f64,
    pub latency_s: f64,
    pub energy_j: f64,
    pub power_mw: f64,
    pub area_mm2: f64,
}

impl SimReport {
    pub const TSV_HEADER: &'static str = "design\tcycles\tlatency_s\tenergy_j\tpower_mw\tarea_mm2";

    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{:e}\t{:e}\t{}\t{}",
            self.design, self.cycles, self.latency_s, self.energy_j, self.power_mw, self.area_mm2
        )
    }
}

/// Latency and energy of `cycles` on the design described by `cfg`.
pub fn energy_estimate(cycles: u64, cfg: &SimConfig) -> Result<SimReport, AccelError> {
    if cycles == 0 {
        return Err(AccelError::ZeroCycles);
    }
    report_for_latency(cycles as f64 / cfg.clock_hz, cfg)
}

/// Energy of a design running for `latency_s` seconds.
pub fn report_for_latency(latency_s: f64, cfg: &SimConfig) -> Result<SimReport, AccelError> {
    if !(latency_s > 0.0 && latency_s.is_finite()) {
        return Err(AccelError::Latency(latency_s));
    }
    Ok(SimReport {
        design: cfg.design.clone(),
        cycles: latency_s * cfg.clock_hz,
        latency_s,
        energy_j: cfg.design_power_mw * 1e-3 * latency_s,
        power_mw: cfg.design_power_mw,
        area_mm2: cfg.design_area_mm2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Savings {
    pub power_pct: f64,
    pub energy_pct: f64,
    pub area_pct: f64,
}

/// Percentage reductions of `candidate` relative to `baseline`.
pub fn report_savings(candidate: &SimReport, baseline: &SimReport) -> Result<Savings, AccelError> {
    if baseline.energy_j.is_nan() || baseline.energy_j <= 0.0 {
        return Err(AccelError::Baseline("energy"));
    }
    if baseline.power_mw.is_nan() || baseline.power_mw <= 0.0 {
        return Err(AccelError::Baseline("power"));
    }
    if baseline.area_mm2.is_nan() || baseline.area_mm2 <= 0.0 {
        return Err(AccelError::Baseline("area"));
    }
    let pct = |c: f64, b: f64| 100.0 * (1.0 - c / b);
    Ok(Savings {
        power_pct: pct(candidate.power_mw, baseline.power_mw),
        energy_pct: pct(candidate.energy_j, baseline.energy_j),
        area_pct: pct(candidate.area_mm2, baseline.area_mm2),
    })
}
