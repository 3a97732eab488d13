// Calibrate, quantize to M4E3 and run the quantized network on the emulated
// datapath, comparing every layer with the normalized fp32 reference.

use phoenix::datapath::ExecOptions;
use phoenix::minifloat::Fp8Format;
use phoenix::netgraph::{infer_quantized, ErrorReport};
use phoenix::quantizer::{collect_stats, quantize_network, StatsMode};
use phoenix::toy;

pub fn run_example() -> phoenix::Result<ErrorReport> {
    let net = toy::random_network(4);
    let mut rng = toy::rng(40);
    let calib = toy::gaussian_tensors(&mut rng, net.input_shape(), 1.0, 16);
    let input = toy::gaussian_tensor(&mut rng, net.input_shape(), 1.0);

    let stats = collect_stats(&net, &calib, StatsMode::SecondMoment, calib.len())?;
    let (qnet, report) = quantize_network(&net, &stats, &calib, Fp8Format::M4E3)?;
    println!("activation scale h = {}", report.h_act);
    for l in &report.layers {
        println!("  {:<8} {:<13} divisor {:.3}  h_w {:?}", l.name, l.kind, l.divisor, l.h_w);
    }

    let run = infer_quantized(&qnet, &input, &ExecOptions::new(14), Some(&net))?;
    let err = run.report.expect("reference given");
    for l in &err.layers {
        println!(
            "  {:<8} rel L2 {:>6.2}%  max abs {:.4}  codes changed {:>5.1}%",
            l.name,
            l.rel_l2_pct,
            l.max_abs_error,
            100.0 * l.changed_code_fraction
        );
    }
    println!("output error {:.2}%", err.output_rel_l2_pct);
    Ok(err)
}

#[allow(dead_code)]
fn main() -> phoenix::Result<()> {
    run_example().map(|_| ())
}
