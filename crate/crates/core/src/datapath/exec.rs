use rayon::prelude::*;

use super::{
    align_truncate_window, fp8_mul, full_precision_bits, round_shift_signed, unit_exp, AccumulatorState, Activation,
    TruncationWindow,
};
use crate::error::{Error, Result};
use crate::minifloat::{pow2, Code8, Fp8Format};
use crate::netgraph::{Op, Shape};
use crate::quantizer::{QuantizedLayer, QuantizedTensor};

/// Where the `t`-bit truncation window sits relative to the product unit `u`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowPlacement {
    /// LSB fixed per layer at the lowest shift where a window of the given
    /// design width still holds the layer's largest possible product (its
    /// largest weight code times the largest activation code). Narrower
    /// windows saturate large products; wider ones add low-order bits once
    /// they reach the top of the full-precision range.
    Anchored(u32),
    /// LSB at `u` in the normalized (unscaled) domain, i.e. a window shift of
    /// `h_act + h_w`, limited to `[0, full_bits - t]`. Products beyond about
    /// `2^(t - 12)` in normalized units saturate.
    Normalized,
    /// Fixed window shift relative to `u` in the scaled code domain.
    /// `Lsb(0)` anchors the window at the full-precision LSB.
    Lsb(i32),
}

/// Design width of the default placement.
pub const DESIGN_T: u32 = 14;

impl Default for WindowPlacement {
    fn default() -> Self {
        WindowPlacement::Anchored(DESIGN_T)
    }
}

impl WindowPlacement {
    pub fn shift(self, fmt: Fp8Format, t: u32, h_act: i32, layer: &QuantizedLayer) -> i32 {
        let top = (full_precision_bits(fmt) as i32 - t as i32).max(0);
        match self {
            WindowPlacement::Anchored(design_t) => {
                let w_max = layer
                    .weights
                    .iter()
                    .copied()
                    .max_by(|a, b| fmt.decode(*a).abs().cmp(&fmt.decode(*b).abs()))
                    .unwrap_or(Code8::ZERO);
                let p = fp8_mul(w_max, fmt.max_code(), fmt);
                let wide = TruncationWindow {
                    t: super::MAX_T,
                    shift: 0,
                };
                let f = align_truncate_window(p, wide, fmt).0.unsigned_abs() as u128;
                let limit = (1u128 << design_t.min(super::MAX_T)) - 1;
                let anchor = (0..).find(|&s| super::round_shift_right(f, s as u32) <= limit).unwrap_or(0);
                anchor.min(top)
            }
            WindowPlacement::Normalized => (h_act + layer.h_w).clamp(0, top),
            WindowPlacement::Lsb(s) => s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecOptions {
    pub t: u32,
    /// Multipliers per PE: channels consumed per pass.
    pub nm: usize,
    /// Spill partial sums to the 16-bit output buffer after every this many
    /// passes (`None`: keep them in the accumulator).
    pub spill_every: Option<usize>,
    pub placement: WindowPlacement,
}

impl ExecOptions {
    pub fn new(t: u32) -> Self {
        ExecOptions {
            t,
            nm: 32,
            spill_every: None,
            placement: WindowPlacement::default(),
        }
    }
}

impl Default for ExecOptions {
    fn default() -> Self {
        Self::new(14)
    }
}

/// Output of one layer plus datapath diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerExecution {
    pub output: QuantizedTensor,
    /// Window shift used by the truncating module (conv/fc only).
    pub window_shift: Option<i32>,
    /// Products clipped by the truncation window.
    pub saturated_products: u64,
    pub products: u64,
    /// Any accumulator, spill or residual saturation.
    pub overflow: bool,
}

impl LayerExecution {
    fn passthrough(output: QuantizedTensor) -> Self {
        LayerExecution {
            output,
            window_shift: None,
            saturated_products: 0,
            products: 0,
            overflow: false,
        }
    }
}

/// Truncated product of every code pair for one window: 64K entries, looked
/// up instead of running the multiplier per lane.
struct ProductTable {
    values: Vec<i32>,
    saturated: Vec<bool>,
}

impl ProductTable {
    fn new(fmt: Fp8Format, w: TruncationWindow) -> Self {
        let mut values = vec![0; 1 << 16];
        let mut saturated = vec![false; 1 << 16];
        // Same shift, widest window: only used to detect clipping.
        let wide = TruncationWindow {
            t: super::MAX_T,
            shift: w.shift,
        };
        for x in 0..=255u8 {
            for y in 0..=255u8 {
                let p = fp8_mul(Code8(x), Code8(y), fmt);
                let i = (x as usize) << 8 | y as usize;
                values[i] = align_truncate_window(p, w, fmt).0;
                saturated[i] = align_truncate_window(p, wide, fmt).0.unsigned_abs() > w.max_magnitude() as u32;
            }
        }
        ProductTable { values, saturated }
    }

    #[inline]
    fn get(&self, x: Code8, y: Code8) -> (i32, bool) {
        let i = (x.0 as usize) << 8 | y.0 as usize;
        (self.values[i], self.saturated[i])
    }
}

/// Runs one layer on the emulated datapath. All operands and the result share
/// the activation scale of `inputs[0]`.
pub fn execute_layer_quantized(
    op: Op,
    inputs: &[&QuantizedTensor],
    params: Option<&QuantizedLayer>,
    opts: &ExecOptions,
) -> Result<LayerExecution> {
    let first = *inputs
        .first()
        .ok_or_else(|| Error::Shape(format!("{} with no inputs", op.kind_name())))?;
    let fmt = first.format;
    let h = first.h_s;
    for x in inputs {
        if x.format != fmt || x.h_s != h {
            return Err(Error::Shape(format!(
                "{} operands disagree on format or scale ({} 2^{} vs {} 2^{})",
                op.kind_name(),
                fmt,
                h,
                x.format,
                x.h_s
            )));
        }
        if x.codes.len() != x.shape.len() {
            return Err(Error::Shape(format!("tensor of shape {} holds {} codes", x.shape, x.codes.len())));
        }
    }
    let shapes: Vec<Shape> = inputs.iter().map(|x| x.shape).collect();
    let out_shape = op.output_shape(&shapes)?;

    match op {
        Op::Conv2d { .. } | Op::FullyConnected { .. } => {
            let q = params.ok_or_else(|| Error::Graph(format!("{} without parameters", op.kind_name())))?;
            let (wlen, blen) = op.param_lens().expect("parametric op");
            if q.weights.len() != wlen || q.bias.values.len() != blen {
                return Err(Error::Shape(format!(
                    "{} expects {wlen} weights and {blen} biases, got {} and {}",
                    op.kind_name(),
                    q.weights.len(),
                    q.bias.values.len()
                )));
            }
            if opts.nm == 0 {
                return Err(Error::Unsupported("PE width Nm = 0".into()));
            }
            run_affine(op, first, q, out_shape, opts)
        }
        Op::MaxPool { kernel, stride } | Op::AvgPool { kernel, stride } => {
            let table = fmt.decode_table();
            let is_max = matches!(op, Op::MaxPool { .. });
            let s = first.shape;
            let mut out = QuantizedTensor::zeros(out_shape, fmt, h);
            for c in 0..out_shape.c {
                for oy in 0..out_shape.h {
                    for ox in 0..out_shape.w {
                        let window = (0..kernel)
                            .flat_map(|ky| (0..kernel).map(move |kx| (oy * stride + ky, ox * stride + kx)))
                            .map(|(y, x)| first.codes[s.index(c, y, x)]);
                        let code = if is_max {
                            let mut best = None::<Code8>;
                            for code in window {
                                if best.map_or(true, |b| table[code.0 as usize] > table[b.0 as usize]) {
                                    best = Some(code);
                                }
                            }
                            best.expect("non-empty pool window")
                        } else {
                            // Decoded FP8 values are short dyadic rationals, so
                            // this sum is exact in f64.
                            let sum: f64 = window.map(|code| table[code.0 as usize]).sum();
                            fmt.encode(sum / (kernel * kernel) as f64)?
                        };
                        out.codes[out_shape.index(c, oy, ox)] = code;
                    }
                }
            }
            Ok(LayerExecution::passthrough(out))
        }
        Op::Relu => {
            let mut out = first.clone();
            for c in &mut out.codes {
                if c.is_negative() {
                    *c = Code8::ZERO;
                }
            }
            Ok(LayerExecution::passthrough(out))
        }
        Op::ResidualAdd => {
            let ue = residual_unit_exp(fmt);
            let table = fmt.decode_table();
            let scale = pow2(-ue);
            let lim = i16::MAX as f64;
            let mut overflow = false;
            let to_fixed = |c: Code8, overflow: &mut bool| {
                let v = (table[c.0 as usize] * scale).round_ties_even();
                *overflow |= v.abs() > lim;
                v.clamp(-lim, lim) as i16
            };
            let mut out = QuantizedTensor::zeros(out_shape, fmt, h);
            for (i, o) in out.codes.iter_mut().enumerate() {
                let a = to_fixed(inputs[0].codes[i], &mut overflow);
                let b = to_fixed(inputs[1].codes[i], &mut overflow);
                let sum = (a as i32 + b as i32).clamp(-(i16::MAX as i32), i16::MAX as i32);
                overflow |= sum != a as i32 + b as i32;
                *o = fmt.encode(sum as f64 * pow2(ue))?;
            }
            let mut e = LayerExecution::passthrough(out);
            e.overflow = overflow;
            Ok(e)
        }
        Op::Concat => {
            let mut out = QuantizedTensor::zeros(out_shape, fmt, h);
            out.codes.clear();
            for x in inputs {
                out.codes.extend_from_slice(&x.codes);
            }
            Ok(LayerExecution::passthrough(out))
        }
        Op::BatchNorm { .. } => Err(Error::Unsupported(
            "batch norm has no datapath mapping; fold it into the preceding conv".into(),
        )),
    }
}

/// Binary point of the 16-bit residual adder: as fine as possible while twice
/// the largest code magnitude still fits.
pub fn residual_unit_exp(fmt: Fp8Format) -> i32 {
    let min_exp = fmt.min_positive().exponent();
    let need = (2.0 * fmt.max_value().to_f64() / i16::MAX as f64).log2().ceil() as i32;
    min_exp.max(need)
}

fn run_affine(op: Op, x: &QuantizedTensor, q: &QuantizedLayer, out_shape: Shape, opts: &ExecOptions) -> Result<LayerExecution> {
    let fmt = x.format;
    let h_a = x.h_s;
    let s = opts.placement.shift(fmt, opts.t, h_a, q);
    let window = TruncationWindow::new(opts.t, fmt)?.with_shift(s);
    let table = ProductTable::new(fmt, window);
    let ue = unit_exp(fmt);
    let out_shift = s - q.h_w;
    // Real (normalized) weight of one accumulator unit.
    let acc_exp = ue + s - h_a - q.h_w;
    let spill_shift = q.spill_exp - acc_exp;
    let bias_shift = h_a + q.h_w - s - q.bias.frac_bits - ue;
    let biases: Vec<i32> = q
        .bias
        .values
        .iter()
        .map(|&b| round_shift_signed(b as i64, -bias_shift).clamp(i32::MIN as i64, i32::MAX as i64) as i32)
        .collect();
    let relu = op.activation() == Activation::Relu;

    let (kernel, stride, pad, ic) = match op {
        Op::Conv2d {
            in_channels,
            kernel,
            stride,
            pad,
            ..
        } => (kernel, stride, pad, in_channels),
        // fc is a 1x1 conv over the flattened input.
        Op::FullyConnected { inputs, .. } => (1, 1, 0, inputs),
        _ => unreachable!(),
    };
    let in_shape = match op {
        Op::FullyConnected { inputs, .. } => Shape::new(inputs, 1, 1),
        _ => x.shape,
    };
    let plane = out_shape.h * out_shape.w;
    let nm = opts.nm;

    struct Channel {
        codes: Vec<Code8>,
        saturated: u64,
        overflow: bool,
    }
    let channels: Vec<Channel> = (0..out_shape.c)
        .into_par_iter()
        .map(|oc| {
            let mut ch = Channel {
                codes: Vec::with_capacity(plane),
                saturated: 0,
                overflow: false,
            };
            let wbase = oc * ic * kernel * kernel;
            for oy in 0..out_shape.h {
                for ox in 0..out_shape.w {
                    let mut acc = AccumulatorState::new();
                    let total_passes = kernel * kernel * ic.div_ceil(nm);
                    let mut pass = 0;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            let inside = iy >= 0 && ix >= 0 && (iy as usize) < in_shape.h && (ix as usize) < in_shape.w;
                            for c0 in (0..ic).step_by(nm) {
                                let mut sum = 0i64;
                                if inside {
                                    for c in c0..(c0 + nm).min(ic) {
                                        let a = x.codes[in_shape.index(c, iy as usize, ix as usize)];
                                        let w = q.weights[wbase + (c * kernel + ky) * kernel + kx];
                                        let (v, sat) = table.get(a, w);
                                        sum += v as i64;
                                        ch.saturated += sat as u64;
                                    }
                                }
                                acc.accumulate(sum);
                                pass += 1;
                                if let Some(every) = opts.spill_every {
                                    if every > 0 && pass % every == 0 && pass < total_passes {
                                        let stored = acc.spill(spill_shift);
                                        acc.reload(stored, spill_shift);
                                    }
                                }
                            }
                        }
                    }
                    ch.codes.push(acc.finish(biases[oc], relu, out_shift, fmt));
                    ch.overflow |= acc.overflow;
                }
            }
            ch
        })
        .collect();

    let mut out = QuantizedTensor::zeros(out_shape, fmt, h_a);
    out.codes.clear();
    let mut saturated = 0;
    let mut overflow = false;
    for ch in channels {
        out.codes.extend(ch.codes);
        saturated += ch.saturated;
        overflow |= ch.overflow;
    }
    let products = (out_shape.len() * ic * kernel * kernel) as u64;
    Ok(LayerExecution {
        output: out,
        window_shift: Some(s),
        saturated_products: saturated,
        products,
        overflow,
    })
}
