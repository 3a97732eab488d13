// One PE pass traced through the datapath: raw products, truncation at two
// widths, the adder tree and post-processing back to 8 bits.

use phoenix::datapath::{align_truncate, fp8_mul, pe_dot, unit_exp, AccumulatorState, TruncationWindow};
use phoenix::minifloat::{Code8, Fp8Format};

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub exact_sum: f64,
    pub sum_t22: i64,
    pub sum_t14: i64,
    pub output: Code8,
}

pub fn run_example() -> phoenix::Result<Trace> {
    let fmt = Fp8Format::M4E3;
    let mut rng = phoenix::toy::rng(5);
    let acts: Vec<Code8> = phoenix::toy::gaussian(&mut rng, 32, 2.0)
        .iter()
        .map(|&v| fmt.encode(v as f64))
        .collect::<phoenix::Result<_>>()?;
    let weights: Vec<Code8> = phoenix::toy::gaussian(&mut rng, 32, 4.0)
        .iter()
        .map(|&v| fmt.encode(v as f64))
        .collect::<phoenix::Result<_>>()?;

    for (a, w) in acts.iter().zip(&weights).take(4) {
        let p = fp8_mul(*a, *w, fmt);
        println!(
            "{} x {} : {}  t22={} t14={}",
            fmt.decode_f64(*a),
            fmt.decode_f64(*w),
            p.trace_line(fmt),
            align_truncate(p, 22, fmt)?.0,
            align_truncate(p, 14, fmt)?.0
        );
    }

    let u = (unit_exp(fmt) as f64).exp2();
    let exact_sum: f64 = acts.iter().zip(&weights).map(|(a, w)| fmt.decode_f64(*a) * fmt.decode_f64(*w)).sum();
    let sum_t22 = pe_dot(&acts, &weights, fmt, TruncationWindow::new(22, fmt)?);
    let sum_t14 = pe_dot(&acts, &weights, fmt, TruncationWindow::new(14, fmt)?);
    println!("exact {exact_sum}  t22 {} ({sum_t22} u)  t14 {} ({sum_t14} u)", sum_t22 as f64 * u, sum_t14 as f64 * u);

    let mut acc = AccumulatorState::new();
    acc.accumulate(sum_t22);
    let output = acc.finish(0, false, 0, fmt);
    println!("post-processed: {:#04x} = {}", output.bits(), fmt.decode_f64(output));
    Ok(Trace {
        exact_sum,
        sum_t22,
        sum_t14,
        output,
    })
}

#[allow(dead_code)]
fn main() -> phoenix::Result<()> {
    run_example().map(|_| ())
}
