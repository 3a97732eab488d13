// Cycle model: AlexNet conv layers on the Eyeriss-sized configuration, and
// a sweep over the number of PEs on a VGG-style stack.

use phoenix::netgraph::Shape;
use phoenix::perfmodel::{parse_np_sweep, peak_throughput, simulate_network, sweep_np, PerfConfig, SweepRow};
use phoenix::toy;

pub fn run_example() -> phoenix::Result<(Vec<u64>, Vec<SweepRow>)> {
    let cfg = PerfConfig::preset("eyeriss-iso")?;
    let alexnet = toy::alexnet_convs();
    let perf = simulate_network(&alexnet.topology, &cfg)?;
    println!("peak {:.3e} MAC/s", peak_throughput(&cfg));
    let mut convs = Vec::new();
    for l in perf.layers.iter().filter(|l| l.kind == "conv2d") {
        println!(
            "{:<6} total {:>9}  compute {:>9}  stall {:>7}  util {:>5.1}%  min bw {:.1} B/cycle",
            l.name, l.total_cycles, l.compute_cycles, l.stall_cycles, l.utilization_pct, l.min_bandwidth
        );
        convs.push(l.total_cycles);
    }
    let ratios: Vec<String> = convs.iter().map(|&c| format!("{:.2}", c as f64 / convs[0] as f64)).collect();
    println!("ratios to conv1: {}", ratios.join(" "));

    let vgg = toy::vgg_like(1, Shape::new(3, 32, 32), &[128, 128, 128, 128]);
    let rows = sweep_np(&vgg.topology, &PerfConfig::default(), &parse_np_sweep("Np=1..512x2")?)?;
    for r in &rows {
        println!(
            "Np={:<4} compute {:>9}  total {:>9}  speedup {:>6.2}",
            r.np, r.compute_cycles, r.total_cycles, r.speedup
        );
    }
    Ok((convs, rows))
}

#[allow(dead_code)]
fn main() -> phoenix::Result<()> {
    run_example().map(|_| ())
}
