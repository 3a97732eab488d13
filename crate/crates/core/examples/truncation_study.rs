// Output error of one conv layer as the product window narrows from 22 to
// 7 bits, relative to the lossless 22-bit result.

use phoenix::datapath::ExecOptions;
use phoenix::minifloat::Fp8Format;
use phoenix::netgraph::{infer_quantized, relative_l2_pct};
use phoenix::quantizer::{collect_stats, quantize_network, QuantizedNetwork, StatsMode};
use phoenix::{toy, Result};

fn outputs(q: &QuantizedNetwork, inputs: &[phoenix::netgraph::Tensor], t: u32) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for x in inputs {
        out.extend(infer_quantized(q, x, &ExecOptions::new(t), None)?.output().values());
    }
    Ok(out)
}

/// Error in percent for every width 7..=22 on a 64-to-64 3x3 conv over
/// four 16x16 N(0,1) images.
pub fn truncation_errors(seed: u64) -> Result<Vec<(u32, f64)>> {
    let net = toy::conv_layer(seed, 64, 64, 3, 16);
    let mut rng = toy::rng(seed + 77);
    let images = toy::gaussian_tensors(&mut rng, net.input_shape(), 1.0, 4);
    let stats = collect_stats(&net, &images, StatsMode::SecondMoment, images.len())?;
    let (q, _) = quantize_network(&net, &stats, &images, Fp8Format::M4E3)?;
    let reference = outputs(&q, &images, 22)?;
    (7..=22).map(|t| Ok((t, relative_l2_pct(&outputs(&q, &images, t)?, &reference)))).collect()
}

pub fn run_example() -> Result<Vec<(u32, f64)>> {
    let errors = truncation_errors(0)?;
    for (t, e) in &errors {
        println!("t={t:>2}  {e:>8.3}%  {}", "#".repeat((e.max(0.01).log10() * 10.0 + 21.0).max(0.0) as usize));
    }
    Ok(errors)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example().map(|_| ())
}
