//! Bit-exact model of one processing element.
//!
//! Lane pipeline: [`fp8_mul`] produces a [`RawProduct`] (sign, mantissa
//! product, exponent sum, bias not yet subtracted); the truncating module
//! ([`align_truncate_window`]) aligns it to a common fixed-point unit and
//! clips it to `t` bits; [`adder_tree`] sums the `Nm` lanes; the
//! post-processing module ([`AccumulatorState`], [`ppm_step`]) accumulates
//! passes, adds the 16-bit bias, applies ReLU and re-encodes to FP8.
//!
//! Unit bookkeeping: a product's aligned magnitude is counted in units of
//! `u = 2^unit_exp(fmt)` (`2^-12` for M4E3), the weight of the smallest
//! possible nonzero product. A window with `shift = s` counts in `u * 2^s`.

mod exec;

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::minifloat::{pow2, Code8, ExactValue, Fp8Format};

pub use exec::{execute_layer_quantized, ExecOptions, LayerExecution, WindowPlacement};

/// Narrowest truncation width the truncating module supports.
pub const MIN_T: u32 = 7;
/// Widest window the 32-bit accumulator path is built for.
pub const MAX_T: u32 = 30;

/// Full-precision multiplier output in sign-product-sum order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RawProduct {
    pub negative: bool,
    /// `(h_x 2^a + M_x)(h_y 2^a + M_y)`, `2(a+1)` bits.
    pub mant_product: u32,
    /// `max(E_x,1) + max(E_y,1)`, `b+1` bits, bias not subtracted.
    pub exp_sum: u32,
}

impl RawProduct {
    /// `2a + b + 4`.
    pub fn width(fmt: Fp8Format) -> u32 {
        2 * fmt.mantissa_bits() + fmt.exponent_bits() + 4
    }

    /// The packed bus word, sign in the top bit and exponent sum at the bottom.
    pub fn pack(self, fmt: Fp8Format) -> u64 {
        let sum_bits = fmt.exponent_bits() + 1;
        let prod_bits = 2 * (fmt.mantissa_bits() + 1);
        ((self.negative as u64) << (prod_bits + sum_bits))
            | ((self.mant_product as u64) << sum_bits)
            | self.exp_sum as u64
    }

    /// `(-1)^sign * mant_product * 2^(exp_sum - 2 bias - 2a)`.
    pub fn value(self, fmt: Fp8Format) -> ExactValue {
        let e = self.exp_sum as i32 - 2 * fmt.bias() - 2 * fmt.mantissa_bits() as i32;
        let v = ExactValue::new(self.mant_product as i128, e);
        if self.negative {
            -v
        } else {
            v
        }
    }

    /// One line of the golden-trace dump: `S=<s> P=<product> E=<sum>`, then
    /// the packed word in binary.
    pub fn trace_line(self, fmt: Fp8Format) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "S={} P={} E={} bits={:0width$b}",
            self.negative as u8,
            self.mant_product,
            self.exp_sum,
            self.pack(fmt),
            width = Self::width(fmt) as usize
        );
        s
    }
}

/// Exponent of the unit `u`: the weight of the smallest nonzero product.
pub fn unit_exp(fmt: Fp8Format) -> i32 {
    fmt.min_exponent_sum() as i32 - 2 * fmt.bias() - 2 * fmt.mantissa_bits() as i32
}

/// Bits needed to hold any aligned product magnitude without loss
/// (22 for M4E3).
pub fn full_precision_bits(fmt: Fp8Format) -> u32 {
    let max = fmt.max_code();
    let p = fp8_mul(max, max, fmt);
    let bits = 32 - p.mant_product.leading_zeros();
    bits + p.exp_sum - fmt.min_exponent_sum()
}

pub fn fp8_mul(x: Code8, y: Code8, fmt: Fp8Format) -> RawProduct {
    let a = fmt.mantissa_bits();
    let fixed_point = fmt.exponent_bits() == 0;
    let significand = |c: Code8| {
        let e = fmt.exponent(c);
        let hidden = if fixed_point || e == 0 { 0 } else { 1 };
        ((hidden << a) | fmt.mantissa(c), if fixed_point { 0 } else { e.max(1) })
    };
    let (mx, ex) = significand(x);
    let (my, ey) = significand(y);
    RawProduct {
        negative: fmt.sign(x) != fmt.sign(y),
        mant_product: mx * my,
        exp_sum: ex + ey,
    }
}

/// Truncating-module configuration: `t` magnitude bits whose LSB weighs
/// `u * 2^shift`. `shift = 0` is the full-precision anchor; positive shifts
/// round away low-order bits, negative shifts only add zero bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TruncationWindow {
    t: u32,
    shift: i32,
}

impl TruncationWindow {
    pub fn new(t: u32, fmt: Fp8Format) -> Result<Self> {
        let max = full_precision_bits(fmt).min(MAX_T);
        if !(MIN_T..=max).contains(&t) {
            return Err(Error::TruncationWidth {
                t,
                min: MIN_T,
                max,
            });
        }
        Ok(TruncationWindow { t, shift: 0 })
    }

    pub fn with_shift(self, shift: i32) -> Self {
        TruncationWindow { shift, ..self }
    }

    pub fn t(&self) -> u32 {
        self.t
    }

    pub fn shift(&self) -> i32 {
        self.shift
    }

    pub fn max_magnitude(&self) -> i64 {
        (1i64 << self.t) - 1
    }
}

/// A truncated product, in units of `u * 2^shift`; `|value| <= 2^t - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct TruncatedValue(pub i32);

/// Truncation with the window anchored at the full-precision LSB.
pub fn align_truncate(p: RawProduct, t: u32, fmt: Fp8Format) -> Result<TruncatedValue> {
    Ok(align_truncate_window(p, TruncationWindow::new(t, fmt)?, fmt))
}

pub fn align_truncate_window(p: RawProduct, w: TruncationWindow, fmt: Fp8Format) -> TruncatedValue {
    let max = w.max_magnitude() as u128;
    let mag = if p.mant_product == 0 {
        0
    } else {
        // Left shift by (exp_sum - min_sum) aligns to u, then apply the
        // window shift; both combine into one net shift.
        let net = p.exp_sum as i32 - fmt.min_exponent_sum() as i32 - w.shift;
        let m = p.mant_product as u128;
        if net >= 0 {
            if net >= 96 || m << net > max {
                max
            } else {
                m << net
            }
        } else {
            round_shift_right(m, (-net) as u32).min(max)
        }
    };
    let mag = mag as i32;
    TruncatedValue(if p.negative { -mag } else { mag })
}

/// `round(m / 2^k)`, ties to even.
pub(crate) fn round_shift_right(m: u128, k: u32) -> u128 {
    if k == 0 {
        return m;
    }
    if k >= 128 {
        return 0;
    }
    let q = m >> k;
    let rem = m & ((1u128 << k) - 1);
    let half = 1u128 << (k - 1);
    if rem > half || (rem == half && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

/// Signed variant of [`round_shift_right`]; the rounding is applied to the
/// magnitude.
pub(crate) fn round_shift_signed(v: i64, k: i32) -> i64 {
    if k <= 0 {
        return v.saturating_mul(1i64.checked_shl((-k) as u32).unwrap_or(i64::MAX));
    }
    let m = round_shift_right(v.unsigned_abs() as u128, k as u32) as i64;
    if v < 0 {
        -m
    } else {
        m
    }
}

/// Exact sum of one PE's lanes. With `|v| < 2^t` and `n` lanes the result
/// fits `t + 1 + ceil(log2 n)` bits.
pub fn adder_tree(values: &[TruncatedValue]) -> i64 {
    // Pairwise reduction mirrors the hardware tree; integer addition makes
    // the shape irrelevant to the result.
    let mut level: Vec<i64> = values.iter().map(|v| v.0 as i64).collect();
    while level.len() > 1 {
        level = level
            .chunks(2)
            .map(|c| c.iter().sum())
            .collect();
    }
    level.first().copied().unwrap_or(0)
}

/// Bits an adder tree over `lanes` inputs of a `t`-bit window needs.
pub fn adder_tree_width(t: u32, lanes: usize) -> u32 {
    t + 1 + (lanes.max(1) as u64).next_power_of_two().trailing_zeros()
}

/// Dot product of two code vectors through multiplier, truncating module and
/// adder tree.
pub fn pe_dot(acts: &[Code8], weights: &[Code8], fmt: Fp8Format, w: TruncationWindow) -> i64 {
    assert_eq!(acts.len(), weights.len(), "PE operands must have equal length");
    let lanes: Vec<TruncatedValue> = acts
        .iter()
        .zip(weights)
        .map(|(&x, &y)| align_truncate_window(fp8_mul(x, y, fmt), w, fmt))
        .collect();
    adder_tree(&lanes)
}

/// Post-processing accumulator for one output pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AccumulatorState {
    pub acc: i32,
    pub passes: u32,
    /// Sticky: set once any accumulation or spill saturated.
    pub overflow: bool,
}

impl AccumulatorState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, sum: i64) {
        let v = self.acc as i64 + sum;
        let clamped = v.clamp(i32::MIN as i64, i32::MAX as i64);
        self.overflow |= clamped != v;
        self.acc = clamped as i32;
        self.passes += 1;
    }

    /// Partial sum as stored in the 16-bit output buffer: rounded to a unit
    /// `2^spill_shift` times the accumulator unit.
    pub fn spill(&mut self, spill_shift: i32) -> i16 {
        let v = round_shift_signed(self.acc as i64, spill_shift);
        let clamped = v.clamp(i16::MIN as i64, i16::MAX as i64);
        self.overflow |= clamped != v;
        clamped as i16
    }

    pub fn reload(&mut self, stored: i16, spill_shift: i32) {
        let v = round_shift_signed(stored as i64, -spill_shift);
        let clamped = v.clamp(i32::MIN as i64, i32::MAX as i64);
        self.overflow |= clamped != v;
        self.acc = clamped as i32;
    }

    /// Bias add, optional ReLU, and conversion of `acc * 2^(unit_exp + out_shift)`
    /// to FP8. `bias` is already in accumulator units.
    pub fn finish(&mut self, bias: i32, relu: bool, out_shift: i32, fmt: Fp8Format) -> Code8 {
        let v = self.acc as i64 + bias as i64;
        let clamped = v.clamp(i32::MIN as i64, i32::MAX as i64);
        self.overflow |= clamped != v;
        let v = if relu { clamped.max(0) } else { clamped };
        let x = v as f64 * pow2(unit_exp(fmt) + out_shift);
        fmt.encode(x).expect("accumulator values are finite")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PpmStep {
    Pending(AccumulatorState),
    Done(Code8, AccumulatorState),
}

/// One PPM cycle: fold `sum` into the accumulator and, on the last pass,
/// emit the output code.
pub fn ppm_step(
    sum: i64,
    mut state: AccumulatorState,
    bias: i32,
    last_pass: bool,
    act: Activation,
    out_shift: i32,
    fmt: Fp8Format,
) -> PpmStep {
    state.accumulate(sum);
    if last_pass {
        let code = state.finish(bias, act == Activation::Relu, out_shift, fmt);
        PpmStep::Done(code, state)
    } else {
        PpmStep::Pending(state)
    }
}
