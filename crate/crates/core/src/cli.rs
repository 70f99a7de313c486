//! Command-line front end: one verb per invocation, JSON summary on stdout.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::accel::{cycle_count, ensemble_cycles, energy_estimate, report_for_latency, report_savings, SimConfig, SimReport};
use crate::container::{load_model, load_topology, read_manifest, save_model};
use crate::convert::{calibrate_network, quantize_network};
use crate::data::{extract_teacher_logits, Dataset, TeacherLogits};
use crate::engine::{argmax, predict};
use crate::finetune::{
    build_ensemble, ensemble_accuracy, evaluate, run_phase1, run_phase2, train_float, EpochRecord,
    TrainConfig, TrainState,
};
use crate::graph::{footprint_as, NetworkDef, Precision};

#[derive(Debug, Parser)]
#[command(name = "mfdfp", version, about = "Multiplier-free dynamic fixed-point networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Choose per-layer activation formats from calibration inputs
    Calibrate(CalibrateArgs),
    /// Convert a float model to 8-bit activations and power-of-two weights
    Quantize(QuantizeArgs),
    /// Run a model on a tensor file and print its logits
    Infer(InferArgs),
    /// Train a float model, or fine-tune a quantized one on hard labels
    Train(TrainArgs),
    /// Hard-label fine-tuning followed by teacher distillation
    Distill(DistillArgs),
    /// Fine-tune several float models and combine them
    Ensemble(EnsembleArgs),
    /// Estimate cycles, latency and energy of a model on the accelerator
    Simulate(SimulateArgs),
    /// Energy and savings from measured latencies
    Report(ReportArgs),
    /// Parameter storage at float32 and mf_dfp precision
    Footprint(FootprintArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Input tensor file
    #[arg(long)]
    pub data: PathBuf,
    /// Label file
    #[arg(long)]
    pub labels: PathBuf,
    /// Trailing fraction of the samples held out for validation
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
}

#[derive(Debug, Args)]
pub struct TrainOpts {
    /// Training config (TOML)
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Calibration tensor file
    #[arg(long)]
    pub calib: PathBuf,
    /// Write the formats here as TOML
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub inputs: PathBuf,
    /// Labels for an accuracy figure
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Write one tab-separated logit row per sample here
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write a teacher-logit file (float models only)
    #[arg(long)]
    pub teacher_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Float model, or topology-only manifest with --float
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Train in float32 instead of fine-tuning a quantized copy
    #[arg(long)]
    pub float: bool,
    #[command(flatten)]
    pub opts: TrainOpts,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    /// Float teacher and starting point
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Precomputed teacher logits for the training split
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub opts: TrainOpts,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    /// Float base models sharing one topology
    #[arg(long, num_args = 1.., required = true)]
    pub models: Vec<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub opts: TrainOpts,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Accelerator config (TOML); defaults to the preset matching the model
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Preset name for the design under test
    #[arg(long, conflicts_with = "config")]
    pub design: Option<String>,
    /// Preset name or config file of the baseline design
    #[arg(long)]
    pub baseline: Option<String>,
    /// Ensemble size
    #[arg(long, default_value_t = 1)]
    pub members: u64,
    /// Write the report here (TOML, plus a .tsv sibling)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, default_value = "mf_dfp")]
    pub design: String,
    #[arg(long)]
    pub latency_us: f64,
    #[arg(long, default_value = "float32")]
    pub baseline: String,
    /// Baseline latency; defaults to the candidate's
    #[arg(long)]
    pub baseline_latency_us: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FootprintArgs {
    #[arg(long)]
    pub model: PathBuf,
}

fn load_dataset(args: &DataArgs, classes: usize) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&args.val_fraction) {
        bail!("--val-fraction must lie in [0, 1)");
    }
    let data = Dataset::load(&args.data, &args.labels, Some(classes)).context("data")?;
    let val = ((data.len() as f64) * args.val_fraction).round() as usize;
    let (train, val_set) = data.split_at(data.len() - val);
    if val_set.is_empty() {
        Ok((train.clone(), train))
    } else {
        Ok((train, val_set))
    }
}

fn train_config(opts: &TrainOpts) -> Result<TrainConfig> {
    let mut cfg = match &opts.config {
        Some(p) => TrainConfig::load(p).context("finetune")?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn model(path: &Path) -> Result<NetworkDef> {
    load_model(path).with_context(|| format!("container: {}", path.display()))
}

fn float_model(path: &Path) -> Result<NetworkDef> {
    let net = model(path)?;
    if net.precision != Precision::Float32 {
        bail!("{} is not a float32 model", path.display());
    }
    Ok(net)
}

fn calib_inputs(path: &Path, net: &NetworkDef) -> Result<Vec<Vec<f64>>> {
    let (dims, values) = crate::data::read_tensor_file(path).context("data")?;
    let per = net.input_shape.len();
    if dims[1..].iter().product::<usize>() != per {
        bail!("data: {} samples have {:?} elements, model expects {per}", path.display(), &dims[1..]);
    }
    Ok(values.chunks(per).map(|c| c.iter().map(|&v| v as f64).collect()).collect())
}

fn save(net: &NetworkDef, dir: &Path) -> Result<()> {
    save_model(net, dir).with_context(|| format!("container: {}", dir.display()))
}

fn history_json(h: &[EpochRecord]) -> Value {
    h.iter()
        .map(|r| {
            json!({
                "epoch": r.epoch,
                "learning_rate": r.learning_rate,
                "train_loss": r.train_loss,
                "val_loss": r.validation.loss,
                "val_accuracy": r.validation.accuracy,
            })
        })
        .collect()
}

fn write_json(dir: &Path, name: &str, v: &Value) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("{}", dir.display()))?;
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("{}", p.display()))
}

fn sim_config(spec: &str) -> Result<SimConfig> {
    let p = Path::new(spec);
    if p.exists() {
        SimConfig::load(p).context("accel")
    } else {
        SimConfig::by_name(spec).context("accel")
    }
}

fn report_json(r: &SimReport) -> Value {
    serde_json::to_value(r).expect("plain struct")
}

/// Execute one command and return its machine-readable summary.
pub fn run(cli: Cli) -> Result<Value> {
    match cli.command {
        Command::Calibrate(a) => {
            let net = float_model(&a.model)?;
            let samples = calib_inputs(&a.calib, &net)?;
            let calib = calibrate_network(&net, &samples).context("convert")?;
            let fracs: Vec<i32> = calib.boundaries.iter().map(|f| f.frac()).collect();
            if let Some(out) = &a.out {
                let text = toml::to_string(&json!({ "bits": 8, "fractional_lengths": fracs, "max_abs": calib.max_abs }))?;
                fs::write(out, text).with_context(|| format!("{}", out.display()))?;
            }
            Ok(json!({ "fractional_lengths": fracs, "max_abs": calib.max_abs }))
        }
        Command::Quantize(a) => {
            let net = float_model(&a.model)?;
            let samples = calib_inputs(&a.calib, &net)?;
            let calib = calibrate_network(&net, &samples).context("convert")?;
            let q = quantize_network(&net, &calib).context("convert")?;
            save(&q, &a.out)?;
            let fp = footprint_as(&q, Precision::MfDfp);
            Ok(json!({
                "out": a.out,
                "radix": q.layers.iter().map(|l| [l.m, l.n]).collect::<Vec<_>>(),
                "footprint_mib": fp.mib(),
            }))
        }
        Command::Infer(a) => {
            let net = model(&a.model)?;
            let inputs = calib_inputs(&a.inputs, &net)?;
            let logits = inputs
                .iter()
                .map(|x| predict(&net, x))
                .collect::<Result<Vec<_>, _>>()
                .context("engine")?;
            if let Some(out) = &a.out {
                let rows: String = logits
                    .iter()
                    .map(|z| z.iter().map(f64::to_string).collect::<Vec<_>>().join("\t") + "\n")
                    .collect();
                fs::write(out, rows).with_context(|| format!("{}", out.display()))?;
            }
            let mut summary = json!({
                "samples": logits.len(),
                "predictions": logits.iter().map(|z| argmax(z)).collect::<Vec<_>>(),
                "logits": logits,
            });
            if let Some(lp) = &a.labels {
                let data = Dataset::load(&a.inputs, lp, Some(net.classes)).context("data")?;
                summary["accuracy"] = json!(evaluate(&net, &data).context("finetune")?.accuracy);
            }
            if let Some(t) = &a.teacher_out {
                let data = Dataset::new(net.input_shape, net.classes, inputs, vec![0; logits.len()]).context("data")?;
                extract_teacher_logits(&net, &data, false).context("finetune")?.write(t).context("data")?;
            }
            Ok(summary)
        }
        Command::Train(a) => {
            let cfg = train_config(&a.opts)?;
            if a.float {
                let manifest = read_manifest(&a.model).with_context(|| format!("container: {}", a.model.display()))?;
                let net = if manifest.layers.iter().any(|l| l.weights.is_some()) {
                    float_model(&a.model)?
                } else {
                    load_topology(&a.model).with_context(|| format!("container: {}", a.model.display()))?
                };
                let (train, val) = load_dataset(&a.data, net.classes)?;
                let run = train_float(&net, &train, &val, cfg).context("finetune")?;
                save(&run.best().network, &a.out)?;
                let summary = json!({
                    "out": a.out,
                    "best_epoch": run.best_epoch,
                    "val_accuracy": evaluate(&run.best().network, &val).context("finetune")?.accuracy,
                    "history": history_json(&run.history),
                });
                write_json(&a.out, "train.json", &summary)?;
                return Ok(summary);
            }
            let net = float_model(&a.model)?;
            let (train, val) = load_dataset(&a.data, net.classes)?;
            let q = crate::convert::quantize_8bit(&net, &train.inputs).context("convert")?;
            let state = TrainState::quantized(&net, q, cfg).context("finetune")?;
            let run = run_phase1(state, &train, &val).context("finetune")?;
            save(&run.best().network, &a.out)?;
            let summary = json!({
                "out": a.out,
                "float_val_accuracy": evaluate(&net, &val).context("finetune")?.accuracy,
                "best_epoch": run.best_epoch,
                "val_accuracy": evaluate(&run.best().network, &val).context("finetune")?.accuracy,
                "history": history_json(&run.history),
            });
            write_json(&a.out, "train.json", &summary)?;
            Ok(summary)
        }
        Command::Distill(a) => {
            let cfg = train_config(&a.opts)?;
            let net = float_model(&a.model)?;
            let (train, val) = load_dataset(&a.data, net.classes)?;
            let teacher = match &a.teacher {
                Some(p) => {
                    let t = TeacherLogits::read(p).context("data")?;
                    if t.len() < train.len() || t.classes != net.classes {
                        bail!("data: teacher file covers {} samples of {} classes", t.len(), t.classes);
                    }
                    t
                }
                None => extract_teacher_logits(&net, &train, false).context("finetune")?,
            };
            let q = crate::convert::quantize_8bit(&net, &train.inputs).context("convert")?;
            let state = TrainState::quantized(&net, q, cfg).context("finetune")?;
            let p1 = run_phase1(state, &train, &val).context("finetune")?;
            let p2 = run_phase2(&p1, &train, &val, &teacher).context("finetune")?;
            save(&p2.best().network, &a.out)?;
            let summary = json!({
                "out": a.out,
                "float_val_accuracy": evaluate(&net, &val).context("finetune")?.accuracy,
                "phase1_val_accuracy": evaluate(&p1.best().network, &val).context("finetune")?.accuracy,
                "phase2_val_accuracy": evaluate(&p2.best().network, &val).context("finetune")?.accuracy,
                "phase1": history_json(&p1.history),
                "phase2": history_json(&p2.history),
            });
            write_json(&a.out, "distill.json", &summary)?;
            Ok(summary)
        }
        Command::Ensemble(a) => {
            let cfg = train_config(&a.opts)?;
            let nets = a.models.iter().map(|p| float_model(p)).collect::<Result<Vec<_>>>()?;
            let (train, val) = load_dataset(&a.data, nets[0].classes)?;
            let seeds: Vec<u64> = (0..nets.len() as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
            let run = build_ensemble(&nets, &train, &val, &cfg, &seeds).context("finetune")?;
            let mut members = Vec::new();
            for (i, m) in run.ensemble.members().iter().enumerate() {
                let dir = a.out.join(format!("member_{i}"));
                save(m, &dir)?;
                members.push(json!({
                    "dir": dir,
                    "val_accuracy": evaluate(m, &val).context("finetune")?.accuracy,
                }));
            }
            let summary = json!({
                "out": a.out,
                "members": members,
                "ensemble_val_accuracy": ensemble_accuracy(&run.ensemble, &val).context("finetune")?,
                "footprint_mib": run.ensemble.footprint().mib(),
            });
            write_json(&a.out, "ensemble.json", &summary)?;
            Ok(summary)
        }
        Command::Simulate(a) => {
            let net = load_topology(&a.model).with_context(|| format!("container: {}", a.model.display()))?;
            let cfg = match (&a.config, &a.design) {
                (Some(p), _) => SimConfig::load(p).context("accel")?,
                (None, Some(d)) => SimConfig::by_name(d).context("accel")?,
                (None, None) => match (net.precision, a.members) {
                    (Precision::Float32, _) => SimConfig::float32(),
                    (Precision::MfDfp, 1) => SimConfig::mf_dfp(),
                    (Precision::MfDfp, _) => SimConfig::mf_dfp_ensemble2(),
                },
            };
            if a.members == 0 {
                bail!("--members must be at least 1");
            }
            let member = cycle_count(&net, &cfg).context("accel")?;
            let cycles = ensemble_cycles(member, a.members, &cfg);
            let report = energy_estimate(cycles, &cfg).context("accel")?;
            let mut summary = json!({ "report": report_json(&report) });
            let mut rows = vec![report.tsv_row()];
            if let Some(b) = &a.baseline {
                let bcfg = sim_config(b)?;
                let bcycles = cycle_count(&net, &bcfg).context("accel")?;
                let base = energy_estimate(bcycles, &bcfg).context("accel")?;
                let savings = report_savings(&report, &base).context("accel")?;
                rows.push(base.tsv_row());
                summary["baseline"] = report_json(&base);
                summary["savings"] = serde_json::to_value(savings)?;
            }
            if let Some(out) = &a.out {
                fs::write(out, toml::to_string(&summary)?).with_context(|| format!("{}", out.display()))?;
                let tsv = out.with_extension("tsv");
                fs::write(&tsv, format!("{}\n{}\n", SimReport::TSV_HEADER, rows.join("\n")))
                    .with_context(|| format!("{}", tsv.display()))?;
            }
            Ok(summary)
        }
        Command::Report(a) => {
            let cfg = sim_config(&a.design)?;
            let bcfg = sim_config(&a.baseline)?;
            let cand = report_for_latency(a.latency_us * 1e-6, &cfg).context("accel")?;
            let base = report_for_latency(a.baseline_latency_us.unwrap_or(a.latency_us) * 1e-6, &bcfg).context("accel")?;
            let savings = report_savings(&cand, &base).context("accel")?;
            let summary = json!({
                "candidate": report_json(&cand),
                "baseline": report_json(&base),
                "candidate_energy_uj": cand.energy_j * 1e6,
                "baseline_energy_uj": base.energy_j * 1e6,
                "savings": serde_json::to_value(savings)?,
            });
            if let Some(out) = &a.out {
                fs::write(out, toml::to_string(&summary)?).with_context(|| format!("{}", out.display()))?;
            }
            Ok(summary)
        }
        Command::Footprint(a) => {
            let net = load_topology(&a.model).with_context(|| format!("container: {}", a.model.display()))?;
            let f = footprint_as(&net, Precision::Float32);
            let q = footprint_as(&net, Precision::MfDfp);
            Ok(json!({
                "weights": f.weight_count,
                "biases": f.bias_count,
                "float32_mib": f.mib(),
                "mf_dfp_mib": q.mib(),
                "weight_ratio": f.weight_bytes as f64 / q.weight_bytes.max(1) as f64,
            }))
        }
    }
}
