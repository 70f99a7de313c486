//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any failure.

mod support;

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use mfdfp::accel::{report_for_latency, report_savings, SimConfig};
use mfdfp::autodiff::{Tape, Var};
use mfdfp::container::load_topology;
use mfdfp::convert::{quantize_network, Calibration};
use mfdfp::data::{synthetic_blobs, BlobSpec, Dataset};
use mfdfp::dfp::{DfpFormat, RoundMode};
use mfdfp::distill::{distill_grad_approx, distill_grad_exact, distill_loss, one_hot};
use mfdfp::engine::{conv_forward, Accumulator, BIAS_LIMIT};
use mfdfp::finetune::{
    build_ensemble, ensemble_accuracy, evaluate, fine_tune, phase1_step, train_float, TrainConfig, TrainState,
};
use mfdfp::graph::{
    accumulator_width, footprint_as, Bias, LayerOp, LayerSpec, NetworkDef, Precision, Shape3, Weights,
};
use mfdfp::po2::{quantize_po2, Po2Weight};
use support::{random_layer, rational_reference, rng, toy_mlp};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn models_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../models")
}

fn compression() -> Outcome {
    let mut r = rng(1);
    let mut exact = 0;
    for _ in 0..200 {
        let layers: Vec<LayerSpec> = (0..r.random_range(1..5))
            .map(|i| {
                let inputs = r.random_range(1..200);
                // an even count per layer keeps per-layer nibble packing free of padding
                let outputs = 2 * r.random_range(1..50);
                LayerSpec::fc(format!("fc{i}"), inputs, outputs)
            })
            .collect();
        let net = NetworkDef::new(Shape3::flat(1), Precision::Float32, layers);
        let f = footprint_as(&net, Precision::Float32);
        let q = footprint_as(&net, Precision::MfDfp);
        if f.weight_bytes == 8 * q.weight_bytes {
            exact += 1;
        }
    }
    let alex = load_topology(&models_dir().join("alexnet")).expect("alexnet manifest");
    let cifar = load_topology(&models_dir().join("cifar10_full")).expect("cifar manifest");
    let mib = |n: &NetworkDef, p| footprint_as(n, p).mib();
    let (af, aq) = (mib(&alex, Precision::Float32), mib(&alex, Precision::MfDfp));
    let (cf, cq) = (mib(&cifar, Precision::Float32), mib(&cifar, Precision::MfDfp));
    let ratio = footprint_as(&alex, Precision::Float32).weight_bytes as f64
        / footprint_as(&alex, Precision::MfDfp).weight_bytes as f64;
    let within = |v: f64, t: f64| (v - t).abs() / t <= 0.01;
    outcome(
        exact == 200 && ratio == 8.0 && within(af, 237.95) && within(aq, 29.75),
        format!(
            "weight-byte ratio exactly 8 on {exact}/200 random nets; AlexNet {af:.2} / {aq:.2} MiB (ratio {ratio}); \
             CIFAR-10 {cf:.4} / {cq:.4} MiB"
        ),
    )
}

fn energy() -> Outcome {
    let r = |us: f64, cfg: SimConfig| report_for_latency(us * 1e-6, &cfg).unwrap();
    let power = report_savings(&r(1.0, SimConfig::mf_dfp()), &r(1.0, SimConfig::float32()))
        .unwrap()
        .power_pct;
    let mf = r(246.27, SimConfig::mf_dfp());
    let fl = r(246.52, SimConfig::float32());
    let ens = r(246.27, SimConfig::mf_dfp_ensemble2());
    let uj = |x: &mfdfp::accel::SimReport| x.energy_j * 1e6;
    let s1 = report_savings(&mf, &fl).unwrap().energy_pct;
    let s2 = report_savings(&ens, &fl).unwrap().energy_pct;
    let rel = |v: f64, t: f64| (v - t).abs() / t <= 1e-3;
    let pass = (power - 89.79).abs() < 0.005
        && rel(uj(&mf), 34.22)
        && rel(uj(&fl), 335.68)
        && rel(uj(&ens), 66.56)
        && (s1 - 89.81).abs() <= 0.1
        && (s2 - 80.17).abs() <= 0.1;
    outcome(
        pass,
        format!(
            "power saving {power:.2}%; energies {:.2} / {:.2} / {:.2} uJ; energy savings {s1:.2}% / {s2:.2}%",
            uj(&mf),
            uj(&fl),
            uj(&ens)
        ),
    )
}

fn oracle() -> Outcome {
    let mut r = rng(2024);
    let (mut same, mut conv, mut fc) = (0, 0, 0);
    let total = 1000;
    for _ in 0..total {
        let t = random_layer(&mut r);
        match t.layer.op {
            LayerOp::Convolution { .. } => conv += 1,
            _ => fc += 1,
        }
        let width = accumulator_width(t.layer.op.kernel_volume() + 1);
        let out = conv_forward(&t.input, &t.layer, width, RoundMode::HalfAwayFromZero).unwrap();
        if out.data() == &rational_reference(&t.input, &t.layer)[..] {
            same += 1;
        }
    }
    outcome(
        same == total,
        format!("{same}/{total} layers bit-identical ({conv} conv, {fc} fc)"),
    )
}

fn no_overflow() -> Outcome {
    let alex = load_topology(&models_dir().join("alexnet")).unwrap();
    let mut fanins = vec![1, 2, 3, 7, 8, 100, 1000, alex.max_fanin(), 1 << 16];
    fanins.extend(rng(3).random_iter::<u16>().take(20).map(|v| v as usize + 1));
    let top = Po2Weight::new(false, 0).unwrap();
    let neg = Po2Weight::new(true, 0).unwrap();
    let mut clean = 0;
    for &fanin in &fanins {
        // fan-in counts the bias slot
        let taps = fanin - 1;
        let width = accumulator_width(fanin);
        for (x, w, b) in [(127, top, BIAS_LIMIT), (-127, top, -BIAS_LIMIT), (127, neg, -BIAS_LIMIT)] {
            let mut acc = Accumulator::for_input(0, width);
            for _ in 0..taps {
                acc.mac(x, w);
            }
            acc.add_bias(b);
            let exact = (taps as i64) * x * (w.sign() << 7) + b;
            if !acc.is_saturated() && acc.value() == exact {
                clean += 1;
            }
        }
    }
    outcome(
        clean == 3 * fanins.len(),
        format!(
            "{clean}/{} all-max accumulations exact and unsaturated, fan-in up to {} (AlexNet max fan-in {}, width {})",
            3 * fanins.len(),
            fanins.iter().max().unwrap(),
            alex.max_fanin(),
            alex.accumulator_width()
        ),
    )
}

/// Worst relative error of `backward` against central differences of `sum(build(...))`.
fn fd_error(inputs: &[Vec<f64>], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |vals: &[Vec<f64>]| {
        let mut t = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| t.leaf(v.clone())).collect();
        let y = build(&mut t, &vars);
        let s = t.sum(y);
        (t, vars, s)
    };
    let (tape, vars, out) = eval(inputs);
    let g = tape.backward(out);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        for i in 0..inputs[k].len() {
            let mut p = inputs.to_vec();
            p[k][i] += h;
            let mut m = inputs.to_vec();
            m[k][i] -= h;
            let (tp, _, op) = eval(&p);
            let (tm, _, om) = eval(&m);
            let fd = (tp.scalar(op) - tm.scalar(om)) / (2.0 * h);
            let an = g.get(*v)[i];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-3));
        }
    }
    worst
}

fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

fn gradients() -> Outcome {
    let mut r = rng(5);
    let a = uniform(&mut r, 6, -2.0, 2.0);
    let b = uniform(&mut r, 6, -2.0, 2.0);
    let pos = uniform(&mut r, 6, 0.2, 3.0);
    let off_kink: Vec<f64> = a.iter().map(|x| if x.abs() < 0.1 { 0.7 } else { *x }).collect();
    let fc = LayerOp::FullyConnected { inputs: 5, outputs: 3 };
    let conv = LayerOp::Convolution {
        in_channels: 2,
        out_channels: 3,
        kernel_h: 3,
        kernel_w: 3,
        stride: 2,
        padding: 1,
    };
    let img = Shape3::new(2, 5, 5);
    let fc_in = vec![uniform(&mut r, 5, -1.0, 1.0), uniform(&mut r, 15, -1.0, 1.0), uniform(&mut r, 3, -1.0, 1.0)];
    let conv_in = vec![uniform(&mut r, 50, -1.0, 1.0), uniform(&mut r, 54, -1.0, 1.0), uniform(&mut r, 3, -1.0, 1.0)];
    let pool_shape = Shape3::new(2, 4, 4);
    let distinct: Vec<f64> = (0..32).map(|i| ((i * 13) % 32) as f64 * 0.1 - 1.5).collect();
    let logits = uniform(&mut r, 5, -3.0, 3.0);
    let target = vec![0.1, 0.2, 0.4, 0.3, 0.0];

    type Case<'a> = (&'a str, Vec<Vec<f64>>, Box<dyn Fn(&mut Tape, &[Var]) -> Var + 'a>);
    let cases: Vec<Case> = vec![
        ("add", vec![a.clone(), b.clone()], Box::new(|t, v| t.add(v[0], v[1]))),
        ("mul", vec![a.clone(), b.clone()], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![a.clone()], Box::new(|t, v| t.scale(v[0], -2.5))),
        ("sum", vec![a.clone()], Box::new(|t, v| {
            let s = t.sum(v[0]);
            t.mul(s, s)
        })),
        ("exp", vec![a.clone()], Box::new(|t, v| t.exp(v[0]))),
        ("ln", vec![pos], Box::new(|t, v| t.ln(v[0]))),
        ("relu", vec![off_kink], Box::new(|t, v| t.relu(v[0]))),
        ("fully_connected", fc_in, Box::new(move |t, v| {
            let y = t.affine(v[0], v[1], v[2], fc, Shape3::flat(5));
            t.mul(y, y)
        })),
        ("convolution", conv_in, Box::new(move |t, v| {
            let y = t.affine(v[0], v[1], v[2], conv, img);
            t.mul(y, y)
        })),
        ("max_pool", vec![distinct.clone()], Box::new(move |t, v| {
            let y = t.max_pool(v[0], pool_shape, 2, 2);
            t.mul(y, y)
        })),
        ("avg_pool", vec![distinct], Box::new(move |t, v| {
            let y = t.avg_pool(v[0], pool_shape, 3, 1);
            t.mul(y, y)
        })),
        ("softmax_cross_entropy", vec![logits], Box::new(move |t, v| {
            t.softmax_cross_entropy(v[0], target.clone(), 4.0)
        })),
    ];
    let mut worst: f64 = 0.0;
    let mut failing = Vec::new();
    for (name, inputs, build) in &cases {
        let e = fd_error(inputs, build.as_ref());
        worst = worst.max(e);
        if e > 1e-5 {
            failing.push(*name);
        }
    }

    // distillation loss: analytic logit gradient against central differences
    let mut dist_worst: f64 = 0.0;
    for _ in 0..50 {
        let zs = uniform(&mut r, 6, -4.0, 4.0);
        let zt = uniform(&mut r, 6, -4.0, 4.0);
        let y = one_hot(r.random_range(0..6), 6);
        let tau = r.random_range(1.0..30.0);
        let g = distill_grad_exact(&zs, &zt, &y, tau, 0.2).unwrap();
        for i in 0..6 {
            let h = 1e-5;
            let (mut p, mut m) = (zs.clone(), zs.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (distill_loss(&p, &zt, &y, tau, 0.2).unwrap() - distill_loss(&m, &zt, &y, tau, 0.2).unwrap())
                / (2.0 * h);
            dist_worst = dist_worst.max((fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-3));
        }
    }

    // approximate soft gradient against the exact one as temperature grows
    let centred = |v: Vec<f64>| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.into_iter().map(|x| x - m).collect::<Vec<_>>()
    };
    let zs = centred(uniform(&mut r, 10, -3.0, 3.0));
    let zt = centred(uniform(&mut r, 10, -3.0, 3.0));
    let y = one_hot(4, 10);
    let gaps: Vec<f64> = [10.0, 100.0, 1000.0]
        .iter()
        .map(|&tau| {
            let e = distill_grad_exact(&zs, &zt, &y, tau, 0.2).unwrap();
            let a = distill_grad_approx(&zs, &zt, &y, 0.2, tau).unwrap();
            e.iter().zip(&a).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        })
        .collect();
    let monotone = gaps[0] > gaps[1] && gaps[1] > gaps[2];
    outcome(
        failing.is_empty() && dist_worst <= 1e-5 && monotone,
        format!(
            "{} ops, worst rel. error {worst:.1e}{}; distill gradient worst {dist_worst:.1e}; \
             approx gap at tau 10/100/1000 = {:.2e} / {:.2e} / {:.2e}",
            cases.len(),
            if failing.is_empty() { String::new() } else { format!(" (failing: {failing:?})") },
            gaps[0],
            gaps[1],
            gaps[2]
        ),
    )
}

fn shadow_weights() -> Outcome {
    let float = NetworkDef::new(
        Shape3::flat(1),
        Precision::Float32,
        vec![LayerSpec::fc("fc", 1, 2).with_params(Weights::Float(vec![0.26, -0.26]), Bias::Float(vec![0.0, 0.0]))],
    );
    let calib = Calibration {
        boundaries: vec![DfpFormat::q8(6), DfpFormat::q8(5)],
        max_abs: vec![1.0, 1.0],
    };
    let q = quantize_network(&float, &calib).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.005,
        momentum: 0.0,
        ..TrainConfig::default()
    };
    let mut state = TrainState::quantized(&float, q, cfg).unwrap();
    let data = Dataset::new(Shape3::flat(1), 2, vec![vec![1.0]], vec![0]).unwrap();
    let watched = |s: &TrainState| {
        (
            s.float_weights[0].as_ref().unwrap().weights[0],
            s.network.layers[0].po2_weights().unwrap()[0],
        )
    };
    let (mut prev_w, start_q) = watched(&state);
    let mut quiet_steps = 0;
    let mut monotone = true;
    let mut jump = None;
    for _ in 0..200 {
        state = phase1_step(state, &data, &[0]).unwrap();
        let (w, q) = watched(&state);
        monotone &= w > prev_w;
        prev_w = w;
        if q == start_q {
            quiet_steps += 1;
        } else {
            jump = Some(q);
            break;
        }
    }
    let coupled = quantize_po2(prev_w).unwrap() == watched(&state).1;
    let one_level = jump.is_some_and(|q| q.is_negative() == start_q.is_negative() && q.exponent() == start_q.exponent() + 1);
    outcome(
        quiet_steps >= 10 && one_level && monotone && coupled,
        format!(
            "float weight rose monotonically for {quiet_steps} steps at 2^{} before the quantized weight moved to {}; \
             shadow {prev_w:.4}",
            start_q.exponent(),
            jump.map_or("nothing".to_string(), |q| format!("2^{}", q.exponent()))
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

struct Split {
    train: Dataset,
    val: Dataset,
    test: Dataset,
}

fn toy_split(seed: u64) -> Split {
    let data = synthetic_blobs(&BlobSpec {
        classes: 4,
        features: 8,
        per_class: 500,
        radius: 2.0,
        spread: 0.6,
        seed,
    });
    let (train, rest) = data.split_at(1200);
    let (val, test) = rest.split_at(400);
    Split { train, val, test }
}

fn float_model(split: &Split, seed: u64) -> NetworkDef {
    let cfg = TrainConfig {
        learning_rate: 0.02,
        max_epochs: 40,
        seed,
        ..TrainConfig::default()
    };
    train_float(&toy_mlp(8, 32, 4), &split.train, &split.val, cfg).unwrap().best().network.clone()
}

fn desk_training() -> Outcome {
    let acc = |n: &NetworkDef, d: &Dataset| evaluate(n, d).unwrap().accuracy * 100.0;
    let (mut gaps, mut p1s, mut p2s, mut diffs) = (vec![], vec![], vec![], vec![]);
    for seed in 0..10u64 {
        let split = toy_split(100 + seed);
        let float = float_model(&split, seed);
        let run = fine_tune(&float, &split.train, &split.val, TrainConfig { seed, ..TrainConfig::default() }).unwrap();
        let f = acc(&float, &split.test);
        let p1 = acc(&run.phase1.best().network, &split.test);
        let p2 = acc(run.network(), &split.test);
        gaps.push(f - p1);
        p1s.push(p1);
        p2s.push(p2);
        diffs.push(p2 - p1);
    }
    let worst_gap = gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let paired = median(diffs.clone());
    let wins = diffs.iter().filter(|d| **d >= 0.0).count();

    let split = toy_split(100);
    let bases = [float_model(&split, 0), float_model(&split, 1)];
    let ens = build_ensemble(&bases, &split.train, &split.val, &TrainConfig::default(), &[0, 1]).unwrap();
    let members: Vec<f64> = ens.ensemble.members().iter().map(|m| acc(m, &split.test)).collect();
    let best_member = members.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ens_acc = ensemble_accuracy(&ens.ensemble, &split.test).unwrap() * 100.0;

    outcome(
        worst_gap <= 2.0 && paired >= 0.0 && ens_acc >= best_member - 1.0,
        format!(
            "phase 1 worst gap to float {worst_gap:.2} pt; phase 2 minus phase 1: median {paired:+.2} pt, \
             >= 0 on {wins}/10 seeds (unpaired medians {:.2} vs {:.2}); ensemble {ens_acc:.2}% vs members {:.2}% / {:.2}%",
            median(p2s),
            median(p1s),
            members[0],
            members[1]
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        ("1 compression ratio and footprints", compression),
        ("2 energy model", energy),
        ("3 multiplier-free oracle equivalence", oracle),
        ("4 no accumulator overflow", no_overflow),
        ("5 gradient suite", gradients),
        ("6 shadow-weight mechanics", shadow_weights),
        ("7 desk-scale training", desk_training),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let o = check();
        let secs = start.elapsed().as_secs_f64();
        println!("{} criterion {name} ({secs:.2}s): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!(
        "N/A  criterion 8 not reproducible at desk scale: the CIFAR-10 and ImageNet accuracies \
         (80.77%, 56.16%, 82.61%, 57.57%) and the training curves need full datasets and large-scale training"
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
