// Quantize the same network in all eight formats and compare output error
// on held-out inputs, each format using its widest product window.

use phoenix::datapath::{full_precision_bits, ExecOptions, MAX_T};
use phoenix::minifloat::Fp8Format;
use phoenix::netgraph::{infer_quantized, normalized_reference, relative_l2_pct};
use phoenix::quantizer::{collect_stats, quantize_network, StatsMode};
use phoenix::toy;

pub fn run_example() -> phoenix::Result<Vec<(Fp8Format, f64)>> {
    let net = toy::vgg_like(2, phoenix::netgraph::Shape::new(3, 12, 12), &[16, 16, 24]);
    let mut rng = toy::rng(20);
    let calib = toy::gaussian_tensors(&mut rng, net.input_shape(), 1.0, 8);
    let held_out = toy::gaussian_tensors(&mut rng, net.input_shape(), 1.0, 4);
    let stats = collect_stats(&net, &calib, StatsMode::SecondMoment, calib.len())?;

    let mut rows = Vec::new();
    for fmt in Fp8Format::ALL {
        let (q, _) = quantize_network(&net, &stats, &calib, fmt)?;
        let t = full_precision_bits(fmt).min(MAX_T);
        let (mut got, mut want) = (Vec::new(), Vec::new());
        for x in &held_out {
            got.extend(infer_quantized(&q, x, &ExecOptions::new(t), None)?.output().values());
            want.extend(normalized_reference(&q, &net, x)?.pop().unwrap_or_default());
        }
        let e = relative_l2_pct(&got, &want);
        println!("{fmt}  t {t:>2}  h_act {:>3}  output error {e:>7.2}%", q.h_act);
        rows.push((fmt, e));
    }
    Ok(rows)
}

#[allow(dead_code)]
fn main() -> phoenix::Result<()> {
    run_example().map(|_| ())
}
