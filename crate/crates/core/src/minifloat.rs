//! 8-bit floating-point formats with a configurable mantissa/exponent split.
//!
//! A format `MaEb` packs one sign bit, `a` mantissa bits and `b` exponent
//! bits (`a + b = 7`) into a byte, most-significant first:
//!
//! ```text
//!   7   6 ..      b  b-1 .. 0
//! | S |  mantissa  | exponent |
//! ```
//!
//! Exponent field zero encodes subnormals (hidden bit 0, effective exponent
//! `1 - bias`). There are no infinities or NaNs: every byte is a finite value
//! and out-of-range inputs saturate to the largest magnitude. `M7E0` has no
//! exponent field at all and is a plain sign-magnitude fixed-point grid with
//! step `2^-7`.
//!
//! Decoding is exact: values come back as [`ExactValue`], a scaled integer.

use std::cmp::Ordering;
use std::fmt;
use std::ops::{Add, Mul, Neg};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An `MaEb` format descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Fp8Format {
    mantissa_bits: u8,
    exponent_bits: u8,
}

impl Fp8Format {
    pub const M7E0: Fp8Format = Fp8Format::raw(7, 0);
    pub const M6E1: Fp8Format = Fp8Format::raw(6, 1);
    pub const M5E2: Fp8Format = Fp8Format::raw(5, 2);
    pub const M4E3: Fp8Format = Fp8Format::raw(4, 3);
    pub const M3E4: Fp8Format = Fp8Format::raw(3, 4);
    pub const M2E5: Fp8Format = Fp8Format::raw(2, 5);
    pub const M1E6: Fp8Format = Fp8Format::raw(1, 6);
    pub const M0E7: Fp8Format = Fp8Format::raw(0, 7);

    /// All eight splits, ordered by mantissa width descending.
    pub const ALL: [Fp8Format; 8] = [
        Self::M7E0,
        Self::M6E1,
        Self::M5E2,
        Self::M4E3,
        Self::M3E4,
        Self::M2E5,
        Self::M1E6,
        Self::M0E7,
    ];

    const fn raw(a: u8, b: u8) -> Self {
        Fp8Format {
            mantissa_bits: a,
            exponent_bits: b,
        }
    }

    pub fn new(mantissa_bits: u8, exponent_bits: u8) -> Result<Self> {
        if mantissa_bits as u32 + exponent_bits as u32 != 7 {
            return Err(Error::InvalidFormat(format!(
                "M{mantissa_bits}E{exponent_bits}"
            )));
        }
        Ok(Self::raw(mantissa_bits, exponent_bits))
    }

    pub fn mantissa_bits(self) -> u32 {
        self.mantissa_bits as u32
    }

    pub fn exponent_bits(self) -> u32 {
        self.exponent_bits as u32
    }

    /// `2^(b-1) - 1`, or 0 for the exponent-less fixed-point format.
    pub fn bias(self) -> i32 {
        match self.exponent_bits {
            0 => 0,
            b => (1 << (b - 1)) - 1,
        }
    }

    pub fn max_exponent_field(self) -> u32 {
        (1 << self.exponent_bits) - 1
    }

    fn mantissa_mask(self) -> u8 {
        ((1u16 << self.mantissa_bits) - 1) as u8
    }

    fn exponent_mask(self) -> u8 {
        ((1u16 << self.exponent_bits) - 1) as u8
    }

    /// Packs fields into a code. Fields wider than the format are masked off.
    pub fn code(self, negative: bool, mantissa: u32, exponent: u32) -> Code8 {
        let m = (mantissa as u8) & self.mantissa_mask();
        let e = (exponent as u8) & self.exponent_mask();
        Code8(((negative as u8) << 7) | (m << self.exponent_bits) | e)
    }

    pub fn sign(self, c: Code8) -> bool {
        c.0 & 0x80 != 0
    }

    pub fn mantissa(self, c: Code8) -> u32 {
        ((c.0 >> self.exponent_bits) & self.mantissa_mask()) as u32
    }

    pub fn exponent(self, c: Code8) -> u32 {
        (c.0 & self.exponent_mask()) as u32
    }

    /// Largest finite code, positive sign.
    pub fn max_code(self) -> Code8 {
        self.code(
            false,
            self.mantissa_mask() as u32,
            self.max_exponent_field(),
        )
    }

    pub fn max_value(self) -> ExactValue {
        self.decode(self.max_code())
    }

    /// Smallest positive value.
    pub fn min_positive(self) -> ExactValue {
        if self.mantissa_bits == 0 {
            self.decode(self.code(false, 0, 1))
        } else {
            self.decode(self.code(false, 1, 0))
        }
    }

    pub fn decode(self, c: Code8) -> ExactValue {
        let a = self.mantissa_bits();
        let m = self.mantissa(c) as i128;
        let e = self.exponent(c) as i32;
        let v = if self.exponent_bits == 0 {
            ExactValue::new(m, -(a as i32))
        } else if e == 0 {
            ExactValue::new(m, 1 - self.bias() - a as i32)
        } else {
            ExactValue::new((1 << a) + m, e - self.bias() - a as i32)
        };
        if self.sign(c) {
            -v
        } else {
            v
        }
    }

    /// Decoded value as `f64`. Exact: every code has at most 8 significant
    /// bits and an exponent well inside the `f64` normal range.
    pub fn decode_f64(self, c: Code8) -> f64 {
        self.decode(c).to_f64()
    }

    /// 256-entry decode table indexed by the raw byte.
    pub fn decode_table(self) -> [f64; 256] {
        let mut t = [0.0; 256];
        for (i, slot) in t.iter_mut().enumerate() {
            *slot = self.decode_f64(Code8(i as u8));
        }
        t
    }

    /// Round-to-nearest encode, ties to even mantissa, saturating at
    /// `±max_value`. Zero (of either sign) and underflow encode as `+0`.
    pub fn encode(self, x: f64) -> Result<Code8> {
        if !x.is_finite() {
            return Err(Error::NonFinite(x));
        }
        let (m, e) = self.encode_magnitude(x.abs());
        if m == 0 && e == 0 {
            return Ok(Code8(0));
        }
        Ok(self.code(x < 0.0, m, e))
    }

    pub fn encode_exact(self, x: ExactValue) -> Code8 {
        // Exact in f64 for every value a datapath can produce; larger
        // mantissas only matter past the saturation point.
        self.encode(x.to_f64())
            .expect("exact values are always finite")
    }

    fn encode_magnitude(self, mag: f64) -> (u32, u32) {
        let a = self.mantissa_bits();
        let max = self.max_value().to_f64();
        if mag >= max {
            return (self.mantissa_mask() as u32, self.max_exponent_field());
        }
        if self.exponent_bits == 0 {
            let m = (mag * pow2(a as i32)).round_ties_even() as u32;
            return (m.min(self.mantissa_mask() as u32), 0);
        }
        let bias = self.bias();
        let min_normal = pow2(1 - bias);
        if mag < min_normal {
            let m = (mag * pow2(a as i32 + bias - 1)).round_ties_even() as u32;
            return if m == 1 << a { (0, 1) } else { (m, 0) };
        }
        let e = floor_log2(mag);
        let mut biased = (e + bias) as u32;
        let frac = mag * pow2(-e) - 1.0;
        let mut m = (frac * pow2(a as i32)).round_ties_even() as u32;
        if m == 1 << a {
            m = 0;
            biased += 1;
        }
        if biased > self.max_exponent_field() {
            return (self.mantissa_mask() as u32, self.max_exponent_field());
        }
        (m, biased)
    }

    /// `encode(x * 2^h_s)`.
    pub fn quantize_value(self, x: f64, h_s: i32) -> Result<Code8> {
        self.encode(x * pow2(h_s))
    }

    /// `decode(c) * 2^-h_s`, exact.
    pub fn dequantize_value(self, c: Code8, h_s: i32) -> ExactValue {
        self.decode(c).shl(-h_s)
    }

    /// Every representable value, ascending, with `±0` collapsed.
    pub fn enumerate_values(self) -> Vec<ExactValue> {
        let mut v: Vec<ExactValue> = (0..=255u8).map(|b| self.decode(Code8(b))).collect();
        v.sort();
        v.dedup();
        v
    }

    /// Smallest exponent sum a multiplier can emit (subnormals count as
    /// exponent 1; the fixed-point format has no exponent field).
    pub(crate) fn min_exponent_sum(self) -> u32 {
        if self.exponent_bits == 0 {
            0
        } else {
            2
        }
    }
}

impl Default for Fp8Format {
    fn default() -> Self {
        Self::M4E3
    }
}

impl fmt::Display for Fp8Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "M{}E{}", self.mantissa_bits, self.exponent_bits)
    }
}

impl FromStr for Fp8Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidFormat(s.to_string());
        let b = s.as_bytes();
        if b.len() != 4 || b[0] != b'M' || b[2] != b'E' {
            return Err(bad());
        }
        let digit = |c: u8| match c {
            b'0'..=b'7' => Ok(c - b'0'),
            _ => Err(bad()),
        };
        Fp8Format::new(digit(b[1])?, digit(b[3])?).map_err(|_| bad())
    }
}

impl Serialize for Fp8Format {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Fp8Format {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One encoded 8-bit value. Meaningless without its [`Fp8Format`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Code8(pub u8);

impl Code8 {
    pub const ZERO: Code8 = Code8(0);

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn is_negative(self) -> bool {
        self.0 & 0x80 != 0
    }

    pub fn negate(self) -> Code8 {
        Code8(self.0 ^ 0x80)
    }

    /// True for both `+0` and `-0` in any format with a hidden-bit-free zero.
    pub fn is_zero(self, fmt: Fp8Format) -> bool {
        fmt.decode(self).is_zero()
    }
}

/// `mantissa * 2^exponent`, kept in canonical form (odd mantissa, or zero
/// with exponent 0) so that structural equality is numeric equality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ExactValue {
    mantissa: i128,
    exponent: i32,
}

impl ExactValue {
    pub const ZERO: ExactValue = ExactValue {
        mantissa: 0,
        exponent: 0,
    };

    pub fn new(mantissa: i128, exponent: i32) -> Self {
        if mantissa == 0 {
            return Self::ZERO;
        }
        let tz = mantissa.trailing_zeros();
        ExactValue {
            mantissa: mantissa >> tz,
            exponent: exponent + tz as i32,
        }
    }

    pub fn from_int(v: i64) -> Self {
        Self::new(v as i128, 0)
    }

    /// Exact conversion of any finite `f64`.
    pub fn from_f64(x: f64) -> Option<Self> {
        if !x.is_finite() {
            return None;
        }
        if x == 0.0 {
            return Some(Self::ZERO);
        }
        let bits = x.to_bits();
        let neg = bits >> 63 != 0;
        let raw_exp = ((bits >> 52) & 0x7ff) as i32;
        let frac = (bits & ((1u64 << 52) - 1)) as i128;
        let (m, e) = if raw_exp == 0 {
            (frac, -1074)
        } else {
            (frac | (1 << 52), raw_exp - 1075)
        };
        Some(Self::new(if neg { -m } else { m }, e))
    }

    pub fn mantissa(self) -> i128 {
        self.mantissa
    }

    pub fn exponent(self) -> i32 {
        self.exponent
    }

    pub fn is_zero(self) -> bool {
        self.mantissa == 0
    }

    pub fn is_negative(self) -> bool {
        self.mantissa < 0
    }

    pub fn abs(self) -> Self {
        ExactValue {
            mantissa: self.mantissa.abs(),
            ..self
        }
    }

    /// Multiply by `2^k`.
    pub fn shl(self, k: i32) -> Self {
        if self.is_zero() {
            self
        } else {
            ExactValue {
                mantissa: self.mantissa,
                exponent: self.exponent + k,
            }
        }
    }

    /// Nearest `f64`; exact whenever the mantissa fits in 53 bits.
    pub fn to_f64(self) -> f64 {
        if self.is_zero() {
            return 0.0;
        }
        // Split so each factor stays in the normal range.
        let m = self.mantissa as f64;
        let half = self.exponent / 2;
        m * pow2(half) * pow2(self.exponent - half)
    }

    /// The value as an integer multiple of `2^unit_exp`, if it is one.
    pub fn to_units(self, unit_exp: i32) -> Option<i128> {
        if self.is_zero() {
            return Some(0);
        }
        let shift = self.exponent - unit_exp;
        if shift < 0 {
            return None;
        }
        self.mantissa.checked_mul(1i128.checked_shl(shift as u32)?)
    }

    pub fn checked_add(self, rhs: Self) -> Option<Self> {
        if self.is_zero() {
            return Some(rhs);
        }
        if rhs.is_zero() {
            return Some(self);
        }
        let e = self.exponent.min(rhs.exponent);
        let a = self.to_units(e)?;
        let b = rhs.to_units(e)?;
        Some(Self::new(a.checked_add(b)?, e))
    }

    pub fn checked_mul(self, rhs: Self) -> Option<Self> {
        Some(Self::new(
            self.mantissa.checked_mul(rhs.mantissa)?,
            self.exponent + rhs.exponent,
        ))
    }

    fn cmp_magnitude(self, other: Self) -> Ordering {
        let (a, b) = (self.mantissa.unsigned_abs(), other.mantissa.unsigned_abs());
        match (a, b) {
            (0, 0) => return Ordering::Equal,
            (0, _) => return Ordering::Less,
            (_, 0) => return Ordering::Greater,
            _ => {}
        }
        let top_a = (128 - a.leading_zeros()) as i64 + self.exponent as i64;
        let top_b = (128 - b.leading_zeros()) as i64 + other.exponent as i64;
        if top_a != top_b {
            return top_a.cmp(&top_b);
        }
        // Same leading-bit position: align the larger exponent down. The
        // difference is bounded by the mantissa widths so this cannot overflow.
        match self.exponent.cmp(&other.exponent) {
            Ordering::Equal => a.cmp(&b),
            Ordering::Greater => (a << (self.exponent - other.exponent)).cmp(&b),
            Ordering::Less => a.cmp(&(b << (other.exponent - self.exponent))),
        }
    }
}

impl Ord for ExactValue {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self.is_negative(), other.is_negative()) {
            (false, true) => Ordering::Greater,
            (true, false) => Ordering::Less,
            (false, false) => self.cmp_magnitude(*other),
            (true, true) => other.cmp_magnitude(*self),
        }
    }
}

impl PartialOrd for ExactValue {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Neg for ExactValue {
    type Output = ExactValue;

    fn neg(self) -> Self {
        ExactValue {
            mantissa: -self.mantissa,
            exponent: self.exponent,
        }
    }
}

impl Add for ExactValue {
    type Output = ExactValue;

    fn add(self, rhs: Self) -> Self {
        self.checked_add(rhs)
            .expect("ExactValue addition overflowed 128-bit alignment")
    }
}

impl Mul for ExactValue {
    type Output = ExactValue;

    fn mul(self, rhs: Self) -> Self {
        self.checked_mul(rhs)
            .expect("ExactValue multiplication overflowed")
    }
}

impl fmt::Display for ExactValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_f64())
    }
}

/// `2^k` as an `f64`, exact for `k` in the normal range.
pub fn pow2(k: i32) -> f64 {
    if (-1022..=1023).contains(&k) {
        f64::from_bits(((k + 1023) as u64) << 52)
    } else {
        2f64.powi(k)
    }
}

/// `floor(log2(x))` for positive normal `x`.
fn floor_log2(x: f64) -> i32 {
    debug_assert!(x.is_normal() && x > 0.0);
    ((x.to_bits() >> 52) & 0x7ff) as i32 - 1023
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: f64) -> ExactValue {
        ExactValue::from_f64(x).unwrap()
    }

    #[test]
    fn bias_follows_exponent_width() {
        let biases: Vec<i32> = Fp8Format::ALL.iter().map(|f| f.bias()).collect();
        assert_eq!(biases, vec![0, 0, 1, 3, 7, 15, 31, 63]);
    }

    #[test]
    fn decode_m4e3_examples() {
        let f = Fp8Format::M4E3;
        assert_eq!(f.decode(f.code(false, 0, 0)), ExactValue::ZERO);
        assert_eq!(f.decode(f.code(false, 8, 3)), v(1.5));
        assert_eq!(f.decode(f.code(false, 15, 7)), v(31.0));
        assert_eq!(f.decode(f.code(true, 1, 0)), v(-0.015625));
    }

    #[test]
    fn byte_layout_is_sign_mantissa_exponent() {
        let f = Fp8Format::M4E3;
        assert_eq!(f.code(false, 8, 3).bits(), 0b0_1000_011);
        assert_eq!(f.code(true, 1, 0).bits(), 0b1_0001_000);
    }

    #[test]
    fn max_values() {
        assert_eq!(Fp8Format::M4E3.max_value(), v(31.0));
        assert_eq!(Fp8Format::M5E2.max_value(), v(7.875));
        assert_eq!(Fp8Format::M3E4.max_value(), v(480.0));
        assert_eq!(Fp8Format::M7E0.max_value(), v(127.0 / 128.0));
    }

    #[test]
    fn max_value_is_largest_decoded_magnitude() {
        for f in Fp8Format::ALL {
            let brute = (0..=255u8).map(|b| f.decode(Code8(b)).abs()).max().unwrap();
            assert_eq!(brute, f.max_value(), "{f}");
        }
    }

    #[test]
    fn encode_examples() {
        let f = Fp8Format::M4E3;
        assert_eq!(f.encode(1.5).unwrap(), f.code(false, 8, 3));
        assert_eq!(f.encode(100.0).unwrap(), f.max_code());
        assert_eq!(f.encode(0.0).unwrap(), Code8(0));
        assert_eq!(f.encode(-0.0).unwrap(), Code8(0));
        assert_eq!(f.encode(-100.0).unwrap(), f.max_code().negate());
    }

    #[test]
    fn encode_rejects_non_finite() {
        let f = Fp8Format::M4E3;
        assert!(matches!(f.encode(f64::NAN), Err(Error::NonFinite(_))));
        assert!(matches!(f.encode(f64::INFINITY), Err(Error::NonFinite(_))));
    }

    #[test]
    fn ties_round_to_even_mantissa() {
        let f = Fp8Format::M4E3;
        // 1 + 1/32 lies halfway between 1.0 (M=0) and 1.0625 (M=1).
        assert_eq!(f.encode(1.0 + 1.0 / 32.0).unwrap(), f.code(false, 0, 3));
        // 1.09375 lies halfway between M=1 and M=2.
        assert_eq!(f.encode(1.09375).unwrap(), f.code(false, 2, 3));
        // Half the smallest subnormal rounds to zero, just above it does not.
        assert_eq!(f.encode(2f64.powi(-7)).unwrap(), Code8(0));
        assert_eq!(
            f.encode(2f64.powi(-7) * 1.001).unwrap(),
            f.code(false, 1, 0)
        );
    }

    #[test]
    fn subnormal_rounds_up_into_normal_range() {
        let f = Fp8Format::M4E3;
        // Just below 2^-2 (smallest normal) but past the last subnormal midpoint.
        let x = 0.25 - 2f64.powi(-8);
        assert_eq!(f.encode(x).unwrap(), f.code(false, 0, 1));
    }

    #[test]
    fn quantize_examples() {
        let f = Fp8Format::M4E3;
        let c = f.quantize_value(0.75, 1).unwrap();
        assert_eq!(c, f.code(false, 8, 3));
        assert_eq!(f.dequantize_value(c, 1), v(0.75));
        for fmt in Fp8Format::ALL {
            assert_eq!(fmt.quantize_value(0.0, 7).unwrap(), Code8(0));
        }
        let c = f.quantize_value(64.0, -1).unwrap();
        assert_eq!(c, f.max_code());
        assert_eq!(f.dequantize_value(c, -1), v(62.0));
    }

    #[test]
    fn enumerate_counts() {
        for f in Fp8Format::ALL {
            let vals = f.enumerate_values();
            assert_eq!(vals.len(), 255, "{f}");
            for (x, y) in vals.iter().zip(vals.iter().rev()) {
                assert_eq!(*x, -*y);
            }
        }
    }

    #[test]
    fn m7e0_is_uniform() {
        let vals = Fp8Format::M7E0.enumerate_values();
        let step = v(1.0 / 128.0);
        for w in vals.windows(2) {
            assert_eq!(w[1] + -w[0], step);
        }
    }

    #[test]
    fn format_strings() {
        for f in Fp8Format::ALL {
            assert_eq!(f.to_string().parse::<Fp8Format>().unwrap(), f);
        }
        for bad in ["M4E4", "m4e3", "M8E-1", "M4E3 ", "E3M4", "", "M9E0"] {
            assert!(bad.parse::<Fp8Format>().is_err(), "{bad}");
        }
    }

    #[test]
    fn exact_value_ordering_across_exponents() {
        assert!(v(2f64.powi(64)) > v(2f64.powi(-62)));
        assert!(v(-3.0) < v(-2.5));
        assert!(v(0.0) > v(-1e-30));
        assert_eq!(v(3.0).cmp(&ExactValue::new(12, -2)), Ordering::Equal);
    }

    #[test]
    fn exact_value_roundtrips_f64() {
        for x in [0.0, 1.0, -1.5, 31.0, 2f64.powi(-62), 1e-310, 123456.789] {
            assert_eq!(v(x).to_f64(), x);
        }
    }
}
