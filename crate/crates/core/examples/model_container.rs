// Write and read the fp32 and quantized model containers.

use phoenix::minifloat::Fp8Format;
use phoenix::netgraph::{load_model, load_qmodel, save_model, save_qmodel, write_qmodel};
use phoenix::quantizer::{collect_stats, quantize_network, StatsMode};
use phoenix::toy;

/// Sizes in bytes of the fp32 and quantized files.
pub fn run_example() -> phoenix::Result<(u64, u64)> {
    let dir = tempfile::tempdir()?;
    let net = toy::random_network(11);
    let model_path = dir.path().join("net.phx");
    save_model(&model_path, &net)?;
    let loaded = load_model(&model_path)?;
    assert_eq!(loaded, net);

    let mut rng = toy::rng(3);
    let calib = toy::gaussian_tensors(&mut rng, net.input_shape(), 1.0, 4);
    let stats = collect_stats(&net, &calib, StatsMode::SecondMoment, 1)?;
    let (q, _) = quantize_network(&loaded, &stats, &calib, Fp8Format::M4E3)?;
    let q_path = dir.path().join("net.phq");
    save_qmodel(&q_path, &q)?;
    let q2 = load_qmodel(&q_path)?;
    assert_eq!(write_qmodel(&q2)?, std::fs::read(&q_path)?);

    let sizes = (std::fs::metadata(&model_path)?.len(), std::fs::metadata(&q_path)?.len());
    println!("{} nodes: fp32 model {} bytes, quantized {} bytes", net.len(), sizes.0, sizes.1);
    Ok(sizes)
}

#[allow(dead_code)]
fn main() -> phoenix::Result<()> {
    run_example().map(|_| ())
}
