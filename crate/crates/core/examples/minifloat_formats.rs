// Range and precision of the eight 8-bit formats, and a few conversions.

use phoenix::minifloat::{Code8, Fp8Format};

#[derive(Debug, Clone, PartialEq)]
pub struct FormatSummary {
    pub format: Fp8Format,
    pub bias: i32,
    pub max: f64,
    pub min_positive: f64,
    pub distinct_values: usize,
}

pub fn run_example() -> phoenix::Result<Vec<FormatSummary>> {
    let mut rows = Vec::new();
    println!("{:<6} {:>5} {:>12} {:>14} {:>8}", "format", "bias", "max", "min_positive", "values");
    for fmt in Fp8Format::ALL {
        let mut values = fmt.enumerate_values();
        values.sort();
        values.dedup();
        let row = FormatSummary {
            format: fmt,
            bias: fmt.bias(),
            max: fmt.max_value().to_f64(),
            min_positive: fmt.min_positive().to_f64(),
            distinct_values: values.len(),
        };
        println!(
            "{:<6} {:>5} {:>12} {:>14.3e} {:>8}",
            row.format.to_string(),
            row.bias,
            row.max,
            row.min_positive,
            row.distinct_values
        );
        rows.push(row);
    }

    let fmt = Fp8Format::M4E3;
    for x in [0.1, 1.0, 2.71828, -7.3, 1000.0] {
        let c = fmt.encode(x)?;
        println!("M4E3 encode({x}) = {:#04x} -> {}", c.bits(), fmt.decode_f64(c));
    }
    // Scaled quantization: 0.003 is below M4E3's range until shifted up by 2^8.
    let c = fmt.quantize_value(0.003, 8)?;
    println!("quantize(0.003, h=8) = {:#04x} -> {}", c.bits(), fmt.dequantize_value(c, 8).to_f64());
    assert_ne!(c, Code8::ZERO);
    Ok(rows)
}

#[allow(dead_code)]
fn main() -> phoenix::Result<()> {
    run_example().map(|_| ())
}
