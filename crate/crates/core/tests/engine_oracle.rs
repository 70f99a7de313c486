mod support;

use mfdfp::dfp::{DfpFormat, DfpTensor, RoundMode};
use mfdfp::engine::{conv_forward, predict, Accumulator};
use mfdfp::graph::{accumulator_width, Bias, LayerSpec, NetworkDef, Precision, Shape3, Weights};
use mfdfp::po2::Po2Weight;
use support::{random_layer, rational_reference, rng};

#[test]
fn shift_accumulate_matches_exact_rational_reference() {
    let mut r = rng(0x5eed);
    for case in 0..300 {
        let t = random_layer(&mut r);
        let width = accumulator_width(t.layer.op.kernel_volume() + 1);
        let out = conv_forward(&t.input, &t.layer, width, RoundMode::HalfAwayFromZero).unwrap();
        assert_eq!(out.data(), &rational_reference(&t.input, &t.layer)[..], "case {case}: {:?}", t.layer.op);
        assert_eq!(out.format(), DfpFormat::q8(t.layer.n));
    }
}

#[test]
fn fc_output_is_invariant_to_input_permutation() {
    let mut r = rng(77);
    for _ in 0..100 {
        let t = random_layer(&mut r);
        let mfdfp::graph::LayerOp::FullyConnected { inputs, outputs } = t.layer.op else { continue };
        let w = t.layer.po2_weights().unwrap();
        // reverse the input order and permute every weight row the same way
        let x: Vec<i32> = t.input.data().iter().rev().copied().collect();
        let pw: Vec<Po2Weight> = (0..outputs)
            .flat_map(|o| (0..inputs).rev().map(move |i| (o, i)))
            .map(|(o, i)| w[o * inputs + i])
            .collect();
        let layer = LayerSpec::fc("p", inputs, outputs)
            .with_radix(t.layer.m, t.layer.n)
            .with_params(Weights::Po2(pw), Bias::Fixed(t.layer.fixed_bias().unwrap().to_vec()));
        let input = DfpTensor::new(vec![inputs, 1, 1], x, t.input.format()).unwrap();
        let width = accumulator_width(inputs + 1);
        let rm = RoundMode::HalfAwayFromZero;
        assert_eq!(
            conv_forward(&input, &layer, width, rm).unwrap(),
            conv_forward(&t.input, &t.layer, width, rm).unwrap()
        );
    }
}

#[test]
fn accumulator_clamps_instead_of_wrapping() {
    let w = Po2Weight::new(false, 0).unwrap();
    let mut acc = Accumulator::for_input(0, 17);
    for _ in 0..10 {
        acc.mac(127, w);
    }
    assert!(acc.is_saturated());
    assert_eq!(acc.value(), acc.bound());
}

#[test]
fn predict_validates_the_network() {
    let net = NetworkDef::new(
        Shape3::flat(2),
        Precision::MfDfp,
        vec![LayerSpec::fc("fc", 2, 1).with_radix(4, 4)],
    );
    assert!(predict(&net, &[0.0, 0.0]).is_err());
}
