mod common;

use common::{product_units, random_codes, window_lane};
use phoenix::datapath::{
    adder_tree_width, align_truncate, fp8_mul, full_precision_bits, pe_dot, unit_exp, AccumulatorState, TruncationWindow,
    MAX_T, MIN_T,
};
use phoenix::minifloat::{Code8, Fp8Format};
use proptest::prelude::*;

fn codes(v: &[u8]) -> Vec<Code8> {
    v.iter().copied().map(Code8).collect()
}

#[test]
fn m4e3_products_need_exactly_22_bits() {
    let fmt = Fp8Format::M4E3;
    let ue = unit_exp(fmt);
    assert_eq!(ue, -12);
    let (mut min_nz, mut max) = (i128::MAX, 0i128);
    for x in 0..=255u8 {
        for y in 0..=255u8 {
            let f = product_units(fmt, x, y, ue).abs();
            if f != 0 {
                min_nz = min_nz.min(f);
            }
            max = max.max(f);
            let p = fp8_mul(Code8(x), Code8(y), fmt);
            assert_eq!(align_truncate(p, 22, fmt).unwrap().0 as i128, product_units(fmt, x, y, ue));
        }
    }
    assert_eq!(min_nz, 1);
    assert_eq!(max, 961 << 12);
    assert_eq!(128 - max.leading_zeros(), 22);
    assert_eq!(full_precision_bits(fmt), 22);
    let top = fp8_mul(fmt.max_code(), fmt.max_code(), fmt);
    assert_eq!(align_truncate(top, 21, fmt).unwrap().0, (1 << 21) - 1);
}

#[test]
fn full_width_window_is_lossless_for_every_format() {
    for fmt in Fp8Format::ALL {
        let bits = full_precision_bits(fmt);
        if bits > MAX_T {
            continue;
        }
        let t = bits.max(MIN_T);
        let ue = unit_exp(fmt);
        for x in 0..=255u8 {
            for y in 0..=255u8 {
                let p = fp8_mul(Code8(x), Code8(y), fmt);
                assert_eq!(align_truncate(p, t, fmt).unwrap().0 as i128, product_units(fmt, x, y, ue), "{fmt}");
            }
        }
    }
}

#[test]
fn raw_product_value_is_exact() {
    for fmt in Fp8Format::ALL {
        for x in (0..=255u8).step_by(7) {
            for y in 0..=255u8 {
                let want = fmt.decode_f64(Code8(x)) * fmt.decode_f64(Code8(y));
                assert_eq!(fp8_mul(Code8(x), Code8(y), fmt).value(fmt).to_f64(), want, "{fmt}");
            }
        }
    }
}

#[test]
fn pe_dot_matches_exact_sum_at_full_width() {
    let fmt = Fp8Format::M4E3;
    let mut rng = phoenix::toy::rng(1);
    let w = TruncationWindow::new(22, fmt).unwrap();
    for _ in 0..5000 {
        let a = random_codes(&mut rng, 32);
        let b = random_codes(&mut rng, 32);
        let exact: i128 = a.iter().zip(&b).map(|(&x, &y)| product_units(fmt, x, y, -12)).sum();
        assert_eq!(pe_dot(&codes(&a), &codes(&b), fmt, w) as i128, exact);
    }
}

#[test]
fn pe_dot_matches_window_oracle() {
    let fmt = Fp8Format::M4E3;
    let mut rng = phoenix::toy::rng(2);
    for (t, shift) in [(14, 0), (14, 3), (10, 6), (7, 1), (18, 4)] {
        let w = TruncationWindow::new(t, fmt).unwrap().with_shift(shift);
        for _ in 0..2000 {
            let a = random_codes(&mut rng, 32);
            let b = random_codes(&mut rng, 32);
            let want: i128 = a
                .iter()
                .zip(&b)
                .map(|(&x, &y)| window_lane(product_units(fmt, x, y, -12), t, shift as u32))
                .sum();
            let got = pe_dot(&codes(&a), &codes(&b), fmt, w) as i128;
            assert_eq!(got, want, "t={t} shift={shift}");
            assert!(got.abs() < 1i128 << (adder_tree_width(t, 32) - 1));
        }
    }
}

#[test]
fn window_width_is_validated() {
    let fmt = Fp8Format::M4E3;
    assert!(TruncationWindow::new(MIN_T - 1, fmt).is_err());
    assert!(TruncationWindow::new(MAX_T + 1, fmt).is_err());
    assert!(TruncationWindow::new(14, fmt).is_ok());
}

#[test]
fn spill_and_reload_round_to_the_spill_unit() {
    let mut acc = AccumulatorState::new();
    acc.accumulate(1000);
    let stored = acc.spill(3);
    assert_eq!(stored, 125);
    acc.reload(stored, 3);
    acc.accumulate(4);
    assert_eq!(acc.spill(0), 1004);
    let mut tie = AccumulatorState::new();
    tie.accumulate(12);
    // 12 / 8 = 1.5 rounds to 2, 20 / 8 = 2.5 rounds to 2.
    assert_eq!(tie.spill(3), 2);
    tie.accumulate(8);
    assert_eq!(tie.spill(3), 2);
}

proptest! {
    #[test]
    fn single_lane_dot_is_that_lane(x: u8, y: u8, t in MIN_T..=22u32) {
        let fmt = Fp8Format::M4E3;
        let w = TruncationWindow::new(t, fmt).unwrap();
        let mut a = vec![Code8(0); 32];
        let mut b = vec![Code8(0); 32];
        a[5] = Code8(x);
        b[5] = Code8(y);
        prop_assert_eq!(pe_dot(&a, &b, fmt, w), align_truncate(fp8_mul(Code8(x), Code8(y), fmt), t, fmt).unwrap().0 as i64);
    }

    #[test]
    fn narrowing_never_grows_a_lane(x: u8, y: u8, t in MIN_T..22u32) {
        let fmt = Fp8Format::M4E3;
        let p = fp8_mul(Code8(x), Code8(y), fmt);
        let narrow = align_truncate(p, t, fmt).unwrap().0;
        let wide = align_truncate(p, t + 1, fmt).unwrap().0;
        prop_assert!(narrow.abs() <= wide.abs());
        prop_assert_eq!(narrow.signum() * wide.signum() >= 0, true);
    }

    #[test]
    fn multiplication_commutes(x: u8, y: u8, i in 0usize..8) {
        let fmt = Fp8Format::ALL[i];
        prop_assert_eq!(fp8_mul(Code8(x), Code8(y), fmt).value(fmt), fp8_mul(Code8(y), Code8(x), fmt).value(fmt));
    }
}
