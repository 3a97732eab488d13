mod common;

use common::{brute_force_scale, merge_error};
use phoenix::minifloat::Fp8Format;
use phoenix::datapath::Activation;
use phoenix::netgraph::{infer_fp32, FloatParams, NetworkGraph, Shape, Source};
use phoenix::quantizer::{
    bias_frac_bits, collect_stats, normalization_divisors, quantize_bias, quantize_network, scale_classes, scale_mse,
    search_scale, LayerStats, StatsMode,
};
use phoenix::toy;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Exp};

#[test]
fn merged_networks_compute_normalized_outputs() {
    for seed in 0..10 {
        let net = toy::random_network(seed);
        let mut rng = toy::rng(seed + 500);
        let inputs = toy::gaussian_tensors(&mut rng, net.input_shape(), 1.0, 3);
        let e = merge_error(&net, &inputs);
        assert!(e < 1e-5, "seed {seed}: {e}");
    }
}

#[test]
fn search_scale_equals_brute_force() {
    let mut rng = toy::rng(12);
    for i in 0..40 {
        let n = rng.gen_range(1..300);
        let std = 10f64.powf(rng.gen_range(-3.0..2.0));
        let v = toy::gaussian(&mut rng, n, std);
        let fmt = Fp8Format::ALL[i % 8];
        assert_eq!(search_scale(&v, fmt).unwrap(), brute_force_scale(&v, fmt), "{fmt} std {std}");
    }
}

#[test]
fn search_scale_rejects_bad_input() {
    assert!(search_scale(&[], Fp8Format::M4E3).is_err());
    assert!(search_scale(&[1.0, f32::NAN], Fp8Format::M4E3).is_err());
    assert_eq!(search_scale(&[0.0; 5], Fp8Format::M4E3).unwrap(), 0);
}

#[test]
fn float_format_wins_on_heavy_tails() {
    let mut rng = toy::rng(9);
    let e = Exp::new(1.0).unwrap();
    let x: Vec<f32> = (0..50_000)
        .map(|_| {
            let v: f64 = e.sample(&mut rng);
            (if rng.gen_bool(0.5) { v } else { -v }) as f32
        })
        .collect();
    let mse = |f| scale_mse(&x, f, search_scale(&x, f).unwrap());
    assert!(mse(Fp8Format::M7E0) > 2.0 * mse(Fp8Format::M4E3));
}

#[test]
fn joins_share_one_divisor() {
    for seed in 0..20 {
        let net = toy::random_network(seed);
        let classes = scale_classes(&net.topology);
        let mut rng = toy::rng(seed);
        let calib = toy::gaussian_tensors(&mut rng, net.input_shape(), 1.0, 2);
        let stats = collect_stats(&net, &calib, StatsMode::SecondMoment, 2).unwrap();
        let d = normalization_divisors(&net, &stats).unwrap();
        assert_eq!(d[0], 1.0);
        for (i, node) in net.nodes().iter().enumerate() {
            if matches!(node.op.kind_name(), "residual_add" | "concat" | "relu" | "maxpool" | "avgpool") {
                for src in &node.inputs {
                    let s = src.tensor_index();
                    assert_eq!(classes[s], classes[i + 1]);
                    assert_eq!(d[s], d[i + 1]);
                }
            }
        }
    }
}

#[test]
fn mean_std_divides_by_the_standard_deviation() {
    let t = phoenix::netgraph::Tensor::new(Shape::new(1, 1, 4), vec![1.0, 3.0, 1.0, 3.0]).unwrap();
    let s = LayerStats::from_tensors([&t]);
    assert_eq!(s.mean, 2.0);
    assert_eq!(s.divisor(StatsMode::MeanStd), 1.0);
    assert_eq!(s.divisor(StatsMode::SecondMoment), 5f64.sqrt());
}

#[test]
fn quantized_network_validates_and_keeps_the_input_unscaled() {
    let net = toy::random_network(3);
    let mut rng = toy::rng(3);
    let calib = toy::gaussian_tensors(&mut rng, net.input_shape(), 1.0, 4);
    let stats = collect_stats(&net, &calib, StatsMode::SecondMoment, 4).unwrap();
    let (q, report) = quantize_network(&net, &stats, &calib, Fp8Format::M4E3).unwrap();
    assert_eq!(q.validate().unwrap(), net.validate().unwrap());
    assert_eq!(q.divisors[0], 1.0);
    assert_eq!(report.layers.len(), net.len());
    let out = infer_fp32(&net, &calib[0]).unwrap();
    assert_eq!(out.layers.len(), net.len());
}

#[test]
fn degenerate_layers_are_reported() {
    let mut net = NetworkGraph::new(Shape::new(2, 4, 4));
    let zero = FloatParams::Affine {
        weights: vec![0.0; 3 * 2 * 9],
        bias: vec![0.0; 3],
    };
    net.push("dead", toy::conv(2, 3, 3, 1, 1, Activation::None), vec![Source::Input], zero);
    let calib = toy::gaussian_tensors(&mut toy::rng(0), net.input_shape(), 1.0, 1);
    let err = collect_stats(&net, &calib, StatsMode::SecondMoment, 1)
        .and_then(|s| normalization_divisors(&net, &s))
        .unwrap_err();
    assert!(err.is_numerical(), "{err}");
}

proptest! {
    #[test]
    fn bias_round_trip_is_within_half_step(v in prop::collection::vec(-4f32..4.0, 1..20)) {
        let fb = bias_frac_bits(&v, 12);
        let q = quantize_bias(&v, fb);
        let step = (-fb as f64).exp2();
        for (d, x) in q.dequantize().iter().zip(&v) {
            prop_assert!((d - *x as f64).abs() <= step / 2.0);
        }
    }

    #[test]
    fn chosen_scale_is_no_worse_than_any_other(v in prop::collection::vec(-50f32..50.0, 1..64), i in 0usize..8) {
        let fmt = Fp8Format::ALL[i];
        let h = search_scale(&v, fmt).unwrap();
        let best = scale_mse(&v, fmt, h);
        for k in -10..10 {
            prop_assert!(best <= scale_mse(&v, fmt, k));
        }
    }
}
