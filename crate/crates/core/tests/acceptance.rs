//! One PASS/FAIL line per acceptance criterion; exits non-zero if any fail.

mod common;

use std::time::Instant;

use common::{brute_force_scale, decode, merge_error, nearest, positive_ladder, product_units, random_codes, window_lane};
use phoenix::datapath::{fp8_mul, full_precision_bits, pe_dot, unit_exp, ExecOptions, TruncationWindow};
use phoenix::minifloat::{Code8, Fp8Format};
use phoenix::netgraph::{infer_quantized, normalized_reference, relative_l2_pct, Shape, Tensor};
use phoenix::perfmodel::{parse_np_sweep, peak_throughput, simulate_network, sweep_np, PerfConfig};
use phoenix::quantizer::{collect_stats, quantize_network, scale_mse, search_scale, QuantizedNetwork, StatsMode};
use phoenix::toy;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn minifloat_exactness() -> Outcome {
    let start = Instant::now();
    let mut failures = 0usize;
    for fmt in Fp8Format::ALL {
        let ladder = positive_ladder(fmt);
        for c in 0..=255u8 {
            let v = fmt.decode_f64(Code8(c));
            failures += (v != decode(fmt, c)) as usize;
            let back = fmt.encode(v).unwrap();
            failures += (back != if v == 0.0 { Code8(0) } else { Code8(c) }) as usize;
            failures += (fmt.decode_f64(Code8(c ^ 0x80)) != -v) as usize;
        }
        for w in ladder.windows(2) {
            failures += (fmt.decode_f64(Code8(w[0].0)) >= fmt.decode_f64(Code8(w[1].0))) as usize;
            let half = (w[1].1 - w[0].1) / 2.0;
            let mid = w[0].1 + half;
            for x in [mid, mid.next_down(), mid.next_up(), w[0].1 + half / 2.0] {
                let c = fmt.encode(x).unwrap();
                failures += (c != Code8(nearest(fmt, &ladder, x))) as usize;
                failures += ((fmt.decode_f64(c) - x).abs() > half) as usize;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(failures == 0 && secs < 1.0, format!("{failures} mismatches over 8 formats x 256 codes, {secs:.3}s"))
}

fn multiplier_width() -> Outcome {
    let start = Instant::now();
    let fmt = Fp8Format::M4E3;
    let ue = unit_exp(fmt);
    let (mut min_nz, mut max) = (f64::INFINITY, 0.0f64);
    let mut mismatches = 0usize;
    for x in 0..=255u8 {
        for y in 0..=255u8 {
            let v = fp8_mul(Code8(x), Code8(y), fmt).value(fmt).to_f64().abs();
            mismatches += (v != (product_units(fmt, x, y, ue).abs() as f64) * (ue as f64).exp2()) as usize;
            if v > 0.0 {
                min_nz = min_nz.min(v);
            }
            max = max.max(v);
        }
    }
    let bits = (max / min_nz).log2().floor() as u32 + 1;
    let secs = start.elapsed().as_secs_f64();
    let pass = mismatches == 0
        && min_nz == 2f64.powi(-12)
        && max == 961.0
        && bits == 22
        && full_precision_bits(fmt) == 22
        && secs < 1.0;
    outcome(pass, format!("min nonzero 2^{}, max {max}, {bits} bits, {secs:.3}s", min_nz.log2()))
}

fn datapath_oracle() -> Outcome {
    let start = Instant::now();
    let fmt = Fp8Format::M4E3;
    let mut rng = toy::rng(2024);
    let w22 = TruncationWindow::new(22, fmt).unwrap();
    let w14 = TruncationWindow::new(14, fmt).unwrap();
    let (mut bad22, mut bad14, mut saturating) = (0usize, 0usize, 0usize);
    for _ in 0..100_000 {
        let a = random_codes(&mut rng, 32);
        let b = random_codes(&mut rng, 32);
        let units: Vec<i128> = a.iter().zip(&b).map(|(&x, &y)| product_units(fmt, x, y, -12)).collect();
        let ac: Vec<Code8> = a.iter().copied().map(Code8).collect();
        let bc: Vec<Code8> = b.iter().copied().map(Code8).collect();
        bad22 += (pe_dot(&ac, &bc, fmt, w22) as i128 != units.iter().sum::<i128>()) as usize;
        let want14: i128 = units.iter().map(|&u| window_lane(u, 14, 0)).sum();
        bad14 += (pe_dot(&ac, &bc, fmt, w14) as i128 != want14) as usize;
        saturating += units.iter().any(|u| u.abs() >= 1 << 14) as usize;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        bad22 == 0 && bad14 == 0 && secs < 30.0,
        format!("1e5 dots: {bad22} mismatches at t=22, {bad14} at t=14 ({saturating} with saturated lanes), {secs:.2}s"),
    )
}

fn truncation_study() -> Outcome {
    let net = toy::conv_layer(0, 64, 64, 3, 16);
    let mut rng = toy::rng(77);
    let images = toy::gaussian_tensors(&mut rng, net.input_shape(), 1.0, 4);
    let stats = collect_stats(&net, &images, StatsMode::SecondMoment, images.len()).unwrap();
    let (q, _) = quantize_network(&net, &stats, &images, Fp8Format::M4E3).unwrap();
    let run = |t: u32| -> Vec<f64> {
        images
            .iter()
            .flat_map(|x| infer_quantized(&q, x, &ExecOptions::new(t), None).unwrap().output().values())
            .collect()
    };
    let reference = run(22);
    let errs: Vec<f64> = (7..=22).map(|t| relative_l2_pct(&run(t), &reference)).collect();
    let (e10, e14) = (errs[3], errs[7]);
    let monotone = errs.windows(2).all(|w| w[1] <= w[0]);
    outcome(
        e14 < 1.0 && monotone && e10 >= 5.0 * e14,
        format!("t=14 {e14:.3}%, t=10 {e10:.2}% ({:.1}x), monotone over 7..22: {monotone}", e10 / e14),
    )
}

fn merge_exactness() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let net = toy::random_network(seed);
        let inputs = toy::gaussian_tensors(&mut toy::rng(seed + 500), net.input_shape(), 1.0, 2);
        worst = worst.max(merge_error(&net, &inputs));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst < 1e-5 && secs < 10.0, format!("worst relative error {worst:.2e} over 20 nets, {secs:.2}s"))
}

fn optimal_mse(x: &[f32], fmt: Fp8Format) -> f64 {
    scale_mse(x, fmt, search_scale(x, fmt).unwrap())
}

fn quantizer_ordering() -> Outcome {
    let mut rng = toy::rng(6);
    let g = toy::gaussian(&mut rng, 100_000, 1.0);
    let ratio = optimal_mse(&g, Fp8Format::M7E0) / optimal_mse(&g, Fp8Format::M4E3);

    let x = toy::gaussian(&mut rng, 100_000, 3.0);
    let rms = (x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
    let normalized: Vec<f32> = x.iter().map(|&v| (v as f64 / rms) as f32).collect();
    let raw = optimal_mse(&x, Fp8Format::M4E3);
    // Error of rms * Q(x / rms) against x, in the original units.
    let with_norm = optimal_mse(&normalized, Fp8Format::M4E3) * rms * rms;
    outcome(
        ratio > 1.2 && with_norm < raw,
        format!(
            "N(0,1): MSE(M7E0)/MSE(M4E3) = {ratio:.3} (need > 1.2); N(0,9): MSE raw {raw:.4e}, normalized {with_norm:.4e}"
        ),
    )
}

fn scale_search() -> Outcome {
    let mut rng = toy::rng(7);
    let mut mismatches = 0;
    for i in 0..100 {
        let n = rng.gen_range(1..400);
        let std = 10f64.powf(rng.gen_range(-4.0..3.0));
        let v = toy::gaussian(&mut rng, n, std);
        let fmt = Fp8Format::ALL[i % 8];
        mismatches += (search_scale(&v, fmt).unwrap() != brute_force_scale(&v, fmt)) as usize;
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches on 100 tensors"))
}

fn perf_model() -> Outcome {
    let peak = peak_throughput(&PerfConfig::default());

    let vgg = toy::vgg_like(0, Shape::new(3, 32, 32), &[128, 128, 128, 128]);
    let rows = sweep_np(&vgg.topology, &PerfConfig::default(), &parse_np_sweep("Np=1..512x2").unwrap()).unwrap();
    let halves = rows.windows(2).filter(|w| w[1].np <= 128).all(|w| w[0].compute_cycles == 2 * w[1].compute_cycles);
    let flat = rows.windows(2).filter(|w| w[0].np >= 128).all(|w| w[0].compute_cycles == w[1].compute_cycles);

    let alexnet = toy::alexnet_convs();
    let perf = simulate_network(&alexnet.topology, &PerfConfig::preset("eyeriss-iso").unwrap()).unwrap();
    let convs: Vec<f64> = perf.layers.iter().filter(|l| l.kind == "conv2d").map(|l| l.total_cycles as f64).collect();
    let published = [4.0, 1.375, 2.0, 1.375];
    let ratios: Vec<f64> = convs[1..].iter().map(|c| c / convs[0]).collect();
    let within = ratios.iter().zip(&published).all(|(r, p)| (r / p - 1.0).abs() <= 0.30);
    let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.2}")).collect();
    outcome(
        peak == 2.048e12 && halves && flat && within,
        format!(
            "peak {peak:.4e} MAC/s; Np sweep halves to 128: {halves}, flat beyond: {flat}; AlexNet CONV2..5/CONV1 [{}] vs [4.0, 1.375, 2.0, 1.375]",
            shown.join(", ")
        ),
    )
}

fn held_out_error(q: &QuantizedNetwork, net: &phoenix::netgraph::NetworkGraph, inputs: &[Tensor]) -> f64 {
    let (mut got, mut want) = (Vec::new(), Vec::new());
    for x in inputs {
        got.extend(infer_quantized(q, x, &ExecOptions::new(14), None).unwrap().output().values());
        want.extend(normalized_reference(q, net, x).unwrap().pop().unwrap());
    }
    relative_l2_pct(&got, &want)
}

fn end_to_end() -> Outcome {
    let mut worst = (0.0f64, 0u64);
    for seed in 0..20 {
        let net = toy::random_network(seed);
        let mut rng = toy::rng(1000 + seed);
        let calib = toy::gaussian_tensors(&mut rng, net.input_shape(), 1.0, 100);
        let held_out = toy::gaussian_tensors(&mut rng, net.input_shape(), 1.0, 8);
        let stats = collect_stats(&net, &calib, StatsMode::SecondMoment, 100).unwrap();
        let (q, _) = quantize_network(&net, &stats, &calib, Fp8Format::M4E3).unwrap();
        let e = held_out_error(&q, &net, &held_out);
        if e > worst.0 {
            worst = (e, seed);
        }
    }
    outcome(
        worst.0 < 5.0,
        format!("worst output error {:.2}% (net {}) over 20 nets, t=14, 8 held-out inputs each", worst.0, worst.1),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("minifloat exactness", minifloat_exactness),
        ("multiplier width", multiplier_width),
        ("datapath oracle", datapath_oracle),
        ("truncation study", truncation_study),
        ("merge exactness", merge_exactness),
        ("quantizer ordering", quantizer_ordering),
        ("scale search", scale_search),
        ("performance model", perf_model),
        ("end-to-end toy networks", end_to_end),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        failed += !o.pass as usize;
        println!("criterion {} {}: {} ({})", i + 1, if o.pass { "PASS" } else { "FAIL" }, name, o.detail);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
