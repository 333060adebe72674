//! Software rounding to reduced-precision grids.
//!
//! Values stay in `f32` storage; only their representable set shrinks. Width
//! 2 is IEEE binary16 and width 1 is the E4M3 8-bit format, which saturates
//! at ±448 instead of overflowing to infinity.

use super::TensorBuf;
use crate::model::PrecisionPlan;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct Grid {
    mantissa_bits: i32,
    exponent_bits: i32,
    bias: i32,
    max: f64,
    saturate: bool,
}

const F16: Grid = Grid { mantissa_bits: 10, exponent_bits: 5, bias: 15, max: 65504.0, saturate: false };
const E4M3: Grid = Grid { mantissa_bits: 3, exponent_bits: 4, bias: 7, max: 448.0, saturate: true };

fn grid(width: u32) -> Result<Option<Grid>> {
    match width {
        4 => Ok(None),
        2 => Ok(Some(F16)),
        1 => Ok(Some(E4M3)),
        w => Err(Error::UnsupportedWidth(w)),
    }
}

fn round_to(g: Grid, x: f32) -> f32 {
    if !x.is_finite() {
        return if g.saturate && x.is_infinite() { (g.max as f32).copysign(x) } else { x };
    }
    if x == 0.0 {
        return x;
    }
    let v = x as f64;
    let e = (((v.abs().to_bits() >> 52) & 0x7ff) as i32 - 1023).max(1 - g.bias);
    let quantum = 2f64.powi(e - g.mantissa_bits);
    let r = (v / quantum).round_ties_even() * quantum;
    if r.abs() > g.max {
        if g.saturate {
            return (g.max as f32).copysign(x);
        }
        return f32::INFINITY.copysign(x);
    }
    r as f32
}

pub fn quantize_value(x: f32, width: u32) -> Result<f32> {
    Ok(match grid(width)? {
        None => x,
        Some(g) => round_to(g, x),
    })
}

pub fn quantize_slice(xs: &[f32], width: u32) -> Result<Vec<f32>> {
    match grid(width)? {
        None => Ok(xs.to_vec()),
        Some(g) => Ok(xs.iter().map(|&x| round_to(g, x)).collect()),
    }
}

/// Compute weights derived from master weights.
pub fn quantize(master: &TensorBuf, plan: &PrecisionPlan) -> Result<TensorBuf> {
    Ok(TensorBuf::new(master.shape.clone(), quantize_slice(&master.values, plan.compute_bytes)?))
}

/// Bit pattern of an already-quantized value at `width` bytes.
pub(crate) fn encode_bits(x: f32, width: u32) -> Result<u32> {
    let g = match grid(width)? {
        None => return Ok(x.to_bits()),
        Some(g) => g,
    };
    let total = 1 + g.exponent_bits + g.mantissa_bits;
    let sign = if x.is_sign_negative() { 1u32 << (total - 1) } else { 0 };
    let exp_max = (1u32 << g.exponent_bits) - 1;
    let mant_mask = (1u32 << g.mantissa_bits) - 1;
    if x.is_nan() {
        return Ok(sign | (exp_max << g.mantissa_bits) | mant_mask);
    }
    if x.is_infinite() {
        return Ok(sign | (exp_max << g.mantissa_bits));
    }
    let a = (x as f64).abs();
    if a == 0.0 {
        return Ok(sign);
    }
    let e = ((a.to_bits() >> 52) & 0x7ff) as i32 - 1023;
    if e < 1 - g.bias {
        let m = a / 2f64.powi(1 - g.bias - g.mantissa_bits);
        return Ok(sign | m as u32);
    }
    let m = (a / 2f64.powi(e) - 1.0) * 2f64.powi(g.mantissa_bits);
    Ok(sign | (((e + g.bias) as u32) << g.mantissa_bits) | m as u32)
}

pub(crate) fn decode_bits(bits: u32, width: u32) -> Result<f32> {
    let g = match grid(width)? {
        None => return Ok(f32::from_bits(bits)),
        Some(g) => g,
    };
    let total = 1 + g.exponent_bits + g.mantissa_bits;
    let neg = bits >> (total - 1) & 1 == 1;
    let exp_max = (1u32 << g.exponent_bits) - 1;
    let exp = (bits >> g.mantissa_bits) & exp_max;
    let mant = bits & ((1u32 << g.mantissa_bits) - 1);
    let mag = if exp == 0 {
        mant as f64 * 2f64.powi(1 - g.bias - g.mantissa_bits)
    } else if exp == exp_max && !g.saturate {
        if mant == 0 {
            f64::INFINITY
        } else {
            f64::NAN
        }
    } else if exp == exp_max && mant == (1u32 << g.mantissa_bits) - 1 {
        f64::NAN
    } else {
        (1.0 + mant as f64 / 2f64.powi(g.mantissa_bits)) * 2f64.powi(exp as i32 - g.bias)
    };
    let v = mag as f32;
    Ok(if neg { -v } else { v })
}

#[cfg(test)]
mod tests {
    use super::*;
    use half::f16;
    use proptest::prelude::*;

    #[test]
    fn tenth_rounds_like_binary16() {
        let q = quantize_value(0.1, 2).unwrap();
        assert_eq!(q, f16::from_f32(0.1).to_f32());
        assert_eq!(q, 0.099975586);
    }

    #[test]
    fn representable_values_unchanged() {
        for x in [1.0f32, -2.5, 0.5, 65504.0, 6.1035156e-5, 5.9604645e-8] {
            assert_eq!(quantize_value(x, 2).unwrap(), x);
        }
        for x in [1.0f32, 448.0, -0.875, 0.015625] {
            assert_eq!(quantize_value(x, 1).unwrap(), x);
        }
    }

    #[test]
    fn width_four_is_identity() {
        for x in [0.1f32, 1e-40, 3.4e38, -7.123_456_7] {
            assert_eq!(quantize_value(x, 4).unwrap().to_bits(), x.to_bits());
        }
    }

    #[test]
    fn unsupported_width() {
        assert!(matches!(quantize_value(1.0, 3), Err(Error::UnsupportedWidth(3))));
    }

    #[test]
    fn e4m3_saturates_and_rounds_even() {
        assert_eq!(quantize_value(1000.0, 1).unwrap(), 448.0);
        assert_eq!(quantize_value(-1e9, 1).unwrap(), -448.0);
        // 1.0625 sits halfway between 1.0 and 1.125; the even mantissa wins.
        assert_eq!(quantize_value(1.0625, 1).unwrap(), 1.0);
        assert_eq!(quantize_value(1.1875, 1).unwrap(), 1.25);
    }

    #[test]
    fn f16_overflow_goes_to_infinity() {
        assert_eq!(quantize_value(65520.0, 2).unwrap(), f32::INFINITY);
        assert_eq!(quantize_value(65519.0, 2).unwrap(), 65504.0);
    }

    proptest! {
        #[test]
        fn matches_half_crate(bits in any::<u32>()) {
            let x = f32::from_bits(bits);
            prop_assume!(!x.is_nan());
            let ours = quantize_value(x, 2).unwrap();
            let oracle = f16::from_f32(x).to_f32();
            prop_assert_eq!(ours.to_bits(), oracle.to_bits(), "x = {:e}", x);
            prop_assert_eq!(encode_bits(ours, 2).unwrap(), f16::from_f32(x).to_bits() as u32);
        }

        #[test]
        fn idempotent(x in -1e6f32..1e6, w in prop::sample::select(vec![1u32, 2, 4])) {
            let q = quantize_value(x, w).unwrap();
            prop_assert_eq!(quantize_value(q, w).unwrap().to_bits(), q.to_bits());
        }

        #[test]
        fn bits_round_trip(x in -500f32..500.0, w in prop::sample::select(vec![1u32, 2, 4])) {
            let q = quantize_value(x, w).unwrap();
            let back = decode_bits(encode_bits(q, w).unwrap(), w).unwrap();
            prop_assert_eq!(back.to_bits(), q.to_bits());
        }
    }
}
