//! Reference implementations written from the bit layout alone, used to
//! check the library.
#![allow(dead_code)]

use phoenix::minifloat::{Code8, Fp8Format};

/// `(sign, mantissa, exponent)` fields of a code; layout is S|M|E from the
/// top bit down.
pub fn fields(fmt: Fp8Format, c: u8) -> (bool, u32, u32) {
    let a = fmt.mantissa_bits();
    let b = fmt.exponent_bits();
    let e = (c as u32) & ((1 << b) - 1);
    let m = ((c as u32) >> b) & ((1 << a) - 1);
    (c & 0x80 != 0, m, e)
}

pub fn bias(fmt: Fp8Format) -> i32 {
    let b = fmt.exponent_bits() as i32;
    if b == 0 {
        0
    } else {
        (1 << (b - 1)) - 1
    }
}

/// Exact value as `(integer, power of two)`.
pub fn decode_exact(fmt: Fp8Format, c: u8) -> (i128, i32) {
    let a = fmt.mantissa_bits() as i32;
    let (s, m, e) = fields(fmt, c);
    let (sig, exp) = if fmt.exponent_bits() == 0 {
        (m as i128, -a)
    } else if e == 0 {
        (m as i128, 1 - bias(fmt) - a)
    } else {
        ((1i128 << a) + m as i128, e as i32 - bias(fmt) - a)
    };
    (if s { -sig } else { sig }, exp)
}

pub fn decode(fmt: Fp8Format, c: u8) -> f64 {
    let (sig, exp) = decode_exact(fmt, c);
    sig as f64 * (exp as f64).exp2()
}

/// Non-negative codes sorted by value, one per distinct value.
pub fn positive_ladder(fmt: Fp8Format) -> Vec<(u8, f64)> {
    let mut v: Vec<(u8, f64)> = (0..=0x7fu8).map(|c| (c, decode(fmt, c))).collect();
    v.sort_by(|x, y| x.1.total_cmp(&y.1));
    v.dedup_by(|x, y| x.1 == y.1);
    v
}

/// Nearest representable code by brute force; ties go to the even
/// mantissa, and to the smaller magnitude when both are even.
pub fn nearest(fmt: Fp8Format, ladder: &[(u8, f64)], x: f64) -> u8 {
    let mag = x.abs();
    let mut best = ladder[0];
    for &(c, v) in ladder {
        let d = (v - mag).abs();
        let bd = (best.1 - mag).abs();
        if d < bd {
            best = (c, v);
        } else if d == bd && v != best.1 {
            let even = |c: u8| fields(fmt, c).1 % 2 == 0;
            let take = match (even(c), even(best.0)) {
                (true, false) => true,
                (false, true) => false,
                _ => v < best.1,
            };
            if take {
                best = (c, v);
            }
        }
    }
    if best.1 == 0.0 || x >= 0.0 {
        best.0
    } else {
        best.0 | 0x80
    }
}

pub fn code(c: u8) -> Code8 {
    Code8(c)
}

/// Exact product of two codes as an integer multiple of `2^unit_exp`.
pub fn product_units(fmt: Fp8Format, x: u8, y: u8, unit_exp: i32) -> i128 {
    let (sx, ex) = decode_exact(fmt, x);
    let (sy, ey) = decode_exact(fmt, y);
    let shift = ex + ey - unit_exp;
    assert!(shift >= 0, "product finer than the unit");
    (sx * sy) << shift
}

/// Round half to even of `m / 2^k`.
pub fn rne_shift(m: i128, k: u32) -> i128 {
    if k == 0 {
        return m;
    }
    let q = m >> k;
    let rem = m - (q << k);
    let half = 1i128 << (k - 1);
    if rem > half || (rem == half && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

/// One lane through a `t`-bit window whose LSB is `2^shift` units: round the
/// magnitude, then saturate at `2^t - 1`.
pub fn window_lane(units: i128, t: u32, shift: u32) -> i128 {
    let mag = rne_shift(units.abs(), shift).min((1i128 << t) - 1);
    if units < 0 {
        -mag
    } else {
        mag
    }
}

pub fn random_codes(rng: &mut impl rand::Rng, n: usize) -> Vec<u8> {
    (0..n).map(|_| rng.gen()).collect()
}

/// Brute-force MSE-optimal scale over `[-10, 10)`: smallest error, then the
/// exponent closest to zero, then the smaller exponent.
pub fn brute_force_scale(values: &[f32], fmt: Fp8Format) -> i32 {
    if values.iter().all(|&v| v == 0.0) {
        return 0;
    }
    let ladder = positive_ladder(fmt);
    let mut best: Option<(f64, i32)> = None;
    for h in -10i32..10 {
        let up = (h as f64).exp2();
        let down = (-h as f64).exp2();
        let mse = values
            .iter()
            .map(|&v| {
                let x = v as f64;
                let e = x - decode(fmt, nearest(fmt, &ladder, x * up)) * down;
                e * e
            })
            .sum::<f64>()
            / values.len() as f64;
        let better = match best {
            None => true,
            Some((m, b)) => mse < m || (mse == m && (h.abs(), h) < (b.abs(), b)),
        };
        if better {
            best = Some((mse, h));
        }
    }
    best.unwrap().1
}

/// Largest relative L2 error, over every tensor slot, between the merged
/// network's fp32 pass and the original pass divided by the divisors.
pub fn merge_error(net: &phoenix::netgraph::NetworkGraph, inputs: &[phoenix::netgraph::Tensor]) -> f64 {
    use phoenix::netgraph::infer_fp32;
    use phoenix::quantizer::{collect_stats, merge_normalization, normalization_divisors, StatsMode};
    let stats = collect_stats(net, inputs, StatsMode::SecondMoment, inputs.len()).unwrap();
    let divisors = normalization_divisors(net, &stats).unwrap();
    let merged = merge_normalization(net, &stats).unwrap();
    let mut worst = 0.0f64;
    for x in inputs {
        let orig = infer_fp32(net, x).unwrap();
        let m = infer_fp32(&merged, x).unwrap();
        for slot in 0..=net.len() {
            let want: Vec<f64> = orig.slot(slot).data.iter().map(|&v| v as f64 / divisors[slot]).collect();
            let got: Vec<f64> = m.slot(slot).data.iter().map(|&v| v as f64).collect();
            let num: f64 = got.iter().zip(&want).map(|(g, w)| (g - w).powi(2)).sum::<f64>().sqrt();
            let den: f64 = want.iter().map(|w| w * w).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            worst = worst.max(num / den);
        }
    }
    worst
}

/// Exact quantized conv/fc: integer sum of code products plus the bias,
/// optional ReLU, rounded once to the activation scale.
pub fn affine_oracle(
    op: phoenix::netgraph::Op,
    x: &phoenix::quantizer::QuantizedTensor,
    q: &phoenix::quantizer::QuantizedLayer,
    out: phoenix::netgraph::Shape,
) -> Vec<Code8> {
    use phoenix::datapath::Activation;
    use phoenix::netgraph::Op;
    let fmt = x.format;
    let ladder = positive_ladder(fmt);
    let ue = phoenix::datapath::unit_exp(fmt);
    let (k, stride, pad, ic, relu) = match op {
        Op::Conv2d { kernel, stride, pad, in_channels, activation, .. } => {
            (kernel, stride, pad, in_channels, activation == Activation::Relu)
        }
        Op::FullyConnected { inputs, activation, .. } => (1, 1, 0, inputs, activation == Activation::Relu),
        _ => panic!("not an affine op"),
    };
    let (h, w) = match op {
        Op::FullyConnected { .. } => (1, 1),
        _ => (x.shape.h, x.shape.w),
    };
    let at = |c: usize, y: isize, xx: isize| -> u8 {
        if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
            0
        } else {
            x.codes[(c * h + y as usize) * w + xx as usize].0
        }
    };
    let mut codes = Vec::with_capacity(out.len());
    for oc in 0..out.c {
        for oy in 0..out.h {
            for ox in 0..out.w {
                // Sum in units of 2^ue (code domain).
                let mut acc: i128 = 0;
                for c in 0..ic {
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = (oy * stride + ky) as isize - pad as isize;
                            let xx = (ox * stride + kx) as isize - pad as isize;
                            let wc = q.weights[((oc * ic + c) * k + ky) * k + kx].0;
                            acc += product_units(fmt, at(c, y, xx), wc, ue);
                        }
                    }
                }
                // value * 2^h_a = acc 2^(ue - h_w) + b 2^(h_a - fb), exact
                // over a common exponent.
                let (h_a, h_w, fb) = (x.h_s, q.h_w, q.bias.frac_bits);
                let b = q.bias.values[oc] as i128;
                let e1 = ue - h_w;
                let e2 = h_a - fb;
                let e = e1.min(e2);
                let total = (acc << (e1 - e)) + (b << (e2 - e));
                let total = if relu { total.max(0) } else { total };
                let v = total as f64 * (e as f64).exp2();
                assert_eq!(v / (e as f64).exp2(), total as f64, "oracle value not exact in f64");
                codes.push(Code8(nearest(fmt, &ladder, v)));
            }
        }
    }
    codes
}
