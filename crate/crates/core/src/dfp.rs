//! Dynamic fixed-point numbers.
//!
//! A format `⟨b, f⟩` holds `b`-bit sign-magnitude numbers whose value is
//! `(-1)^s · 2^(-f) · Σ 2^i·x_i` over the `b - 1` magnitude bits. The
//! fractional length `f` is chosen per tensor (per layer), never per element.
//!
//! Internally the magnitude bits are carried in a signed integer; every
//! observable conversion follows sign-magnitude semantics, including the
//! symmetric range `±(2^(b-1) - 1)` and the absence of negative zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest supported bit width.
pub const MAX_BITS: u32 = 32;

/// Guard used when calibrating on tiny magnitudes.
pub const CALIBRATION_EPSILON: f64 = 1.0 / (1u64 << 24) as f64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DfpError {
    #[error("bit width {0} outside supported range 2..={MAX_BITS}")]
    InvalidBitWidth(u32),
    #[error("calibration needs at least one sample")]
    EmptySamples,
    #[error("non-finite calibration sample {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("tensor shape {shape:?} holds {expected} elements, got {actual}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("element {index} = {value} exceeds magnitude {max} of {format}")]
    OutOfRange {
        index: usize,
        value: i64,
        max: i64,
        format: DfpFormat,
    },
}

/// The `⟨b, f⟩` pair: bit width and fractional length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DfpFormat {
    bits: u32,
    frac: i32,
}

impl DfpFormat {
    pub fn new(bits: u32, frac: i32) -> Result<Self, DfpError> {
        if !(2..=MAX_BITS).contains(&bits) {
            return Err(DfpError::InvalidBitWidth(bits));
        }
        Ok(Self { bits, frac })
    }

    /// 8-bit format with the given fractional length.
    pub const fn q8(frac: i32) -> Self {
        Self { bits: 8, frac }
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn frac(&self) -> i32 {
        self.frac
    }

    /// Largest integer magnitude, `2^(b-1) - 1`.
    pub fn max_int(&self) -> i64 {
        (1i64 << (self.bits - 1)) - 1
    }

    /// Weight of one least significant bit, `2^(-f)`.
    pub fn ulp(&self) -> f64 {
        pow2(-self.frac)
    }

    /// Largest representable magnitude.
    pub fn max_value(&self) -> f64 {
        self.max_int() as f64 * self.ulp()
    }

    /// Clamp a signed integer into the symmetric code range.
    pub fn saturate(&self, v: i64) -> i64 {
        let max = self.max_int();
        v.clamp(-max, max)
    }
}

impl std::fmt::Display for DfpFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "<{},{}>", self.bits, self.frac)
    }
}

/// Tie and truncation behaviour used when a value falls between grid points.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundMode {
    #[default]
    HalfAwayFromZero,
    HalfToEven,
    TowardZero,
}

impl RoundMode {
    /// Round a real number to an integer.
    pub fn round(self, x: f64) -> f64 {
        match self {
            RoundMode::HalfAwayFromZero => x.round(),
            RoundMode::HalfToEven => x.round_ties_even(),
            RoundMode::TowardZero => x.trunc(),
        }
    }

    /// Exact rounded quotient `num / den` for `den > 0`.
    pub fn div(self, num: i128, den: i128) -> i128 {
        debug_assert!(den > 0);
        let q = num / den;
        let r = (num % den).abs();
        let step = num.signum();
        match self {
            RoundMode::TowardZero => q,
            RoundMode::HalfAwayFromZero => {
                if 2 * r >= den {
                    q + step
                } else {
                    q
                }
            }
            RoundMode::HalfToEven => {
                if 2 * r > den || (2 * r == den && q % 2 != 0) {
                    q + step
                } else {
                    q
                }
            }
        }
    }

    /// Exact rounded `v / 2^shift`.
    pub fn shift_right(self, v: i128, shift: u32) -> i128 {
        if shift == 0 {
            return v;
        }
        if shift >= 126 {
            // Callers stay below 2^64 in magnitude; this far right everything rounds to zero.
            return 0;
        }
        self.div(v, 1i128 << shift)
    }
}

/// A single sign-magnitude dynamic fixed-point number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DfpValue {
    negative: bool,
    magnitude: u32,
    format: DfpFormat,
}

impl DfpValue {
    /// Build from a signed integer code, saturating to the format's range.
    pub fn from_int(v: i64, format: DfpFormat) -> Self {
        let v = format.saturate(v);
        Self {
            negative: v < 0,
            magnitude: v.unsigned_abs() as u32,
            format,
        }
    }

    /// Build from an explicit sign bit and magnitude. Negative zero is normalized.
    pub fn from_parts(sign: u8, magnitude: u32, format: DfpFormat) -> Self {
        let magnitude = magnitude.min(format.max_int() as u32);
        Self {
            negative: sign != 0 && magnitude != 0,
            magnitude,
            format,
        }
    }

    /// The sign bit `s`.
    pub fn sign_bit(&self) -> u8 {
        self.negative as u8
    }

    /// Magnitude bit `x_i`, `i` in `0..b-1`.
    pub fn bit(&self, i: u32) -> u8 {
        ((self.magnitude >> i) & 1) as u8
    }

    pub fn magnitude(&self) -> u32 {
        self.magnitude
    }

    pub fn format(&self) -> DfpFormat {
        self.format
    }

    /// Signed integer code (sign applied).
    pub fn to_int(&self) -> i64 {
        if self.negative {
            -(self.magnitude as i64)
        } else {
            self.magnitude as i64
        }
    }
}

pub(crate) fn pow2(e: i32) -> f64 {
    2f64.powi(e)
}

/// Quantize a real number onto the `fmt` grid.
///
/// Values past the largest magnitude saturate; NaN encodes as zero.
pub fn encode(x: f64, fmt: DfpFormat, rounding: RoundMode) -> DfpValue {
    DfpValue::from_int(encode_int(x, fmt, rounding), fmt)
}

/// Signed integer code of `encode`, without building a `DfpValue`.
pub fn encode_int(x: f64, fmt: DfpFormat, rounding: RoundMode) -> i64 {
    if x.is_nan() {
        return 0;
    }
    let max = fmt.max_int();
    // Scaling by a power of two is exact unless it overflows, which the clamp absorbs.
    let scaled = rounding.round(x * pow2(fmt.frac));
    if scaled >= max as f64 {
        max
    } else if scaled <= -(max as f64) {
        -max
    } else {
        scaled as i64
    }
}

/// Exact real value of a code.
pub fn decode(v: DfpValue) -> f64 {
    v.to_int() as f64 * v.format.ulp()
}

/// Real value of a signed integer code in `fmt`.
pub fn decode_int(v: i64, fmt: DfpFormat) -> f64 {
    v as f64 * fmt.ulp()
}

/// Move a wide integer at fractional length `src_f` onto `dst`.
///
/// Narrowing (`src_f >= dst.f`) rounds once with `rounding`; widening is an
/// exact left shift. Either way the result saturates to `dst`'s range.
pub fn requantize(v: i64, src_f: i32, dst: DfpFormat, rounding: RoundMode) -> DfpValue {
    DfpValue::from_int(requantize_int(v as i128, src_f, dst, rounding), dst)
}

pub(crate) fn requantize_int(v: i128, src_f: i32, dst: DfpFormat, rounding: RoundMode) -> i64 {
    let shift = src_f as i64 - dst.frac as i64;
    let max = dst.max_int() as i128;
    let scaled = if shift >= 0 {
        rounding.shift_right(v, shift.min(u32::MAX as i64) as u32)
    } else {
        let left = (-shift) as u32;
        if v == 0 {
            0
        } else if left >= 64 {
            v.signum() * max
        } else {
            v.saturating_mul(1i128 << left)
        }
    };
    scaled.clamp(-max, max) as i64
}

/// Smallest integer `k` with `2^k >= x`, for finite `x > 0`.
pub(crate) fn ceil_log2(x: f64) -> i32 {
    debug_assert!(x > 0.0 && x.is_finite());
    let mut k = x.log2().ceil() as i32;
    while pow2(k - 1) >= x {
        k -= 1;
    }
    while pow2(k) < x {
        k += 1;
    }
    k
}

/// Choose the fractional length that makes `max |sample|` fit a `bits`-wide format.
///
/// `f = (b - 1) - ceil(log2(max(max_abs, ε)))`, with an all-zero batch mapping
/// to the finest grid `f = b - 1`. Magnitudes within half an ulp of the next
/// power of two (the power itself included) saturate to the largest code.
pub fn calibrate_fraction_length(samples: &[f64], bits: u32) -> Result<DfpFormat, DfpError> {
    if samples.is_empty() {
        return Err(DfpError::EmptySamples);
    }
    let mut max_abs = 0f64;
    for (index, &value) in samples.iter().enumerate() {
        if !value.is_finite() {
            return Err(DfpError::NonFinite { index, value });
        }
        max_abs = max_abs.max(value.abs());
    }
    format_for_max_abs(max_abs, bits)
}

/// Calibration rule applied to an already-reduced maximum magnitude.
pub fn format_for_max_abs(max_abs: f64, bits: u32) -> Result<DfpFormat, DfpError> {
    DfpFormat::new(bits, 0)?;
    let top = bits as i32 - 1;
    if max_abs == 0.0 {
        return DfpFormat::new(bits, top);
    }
    if !max_abs.is_finite() {
        return Err(DfpError::NonFinite {
            index: 0,
            value: max_abs,
        });
    }
    DfpFormat::new(bits, top - ceil_log2(max_abs.max(CALIBRATION_EPSILON)))
}

/// An integer-backed tensor sharing one dynamic fixed-point format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DfpTensor {
    shape: Vec<usize>,
    data: Vec<i32>,
    format: DfpFormat,
}

impl DfpTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i32>, format: DfpFormat) -> Result<Self, DfpError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(DfpError::ShapeMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        let max = format.max_int();
        if let Some((index, &v)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| (**v as i64).abs() > max)
        {
            return Err(DfpError::OutOfRange {
                index,
                value: v as i64,
                max,
                format,
            });
        }
        Ok(Self {
            shape,
            data,
            format,
        })
    }

    pub fn zeros(shape: Vec<usize>, format: DfpFormat) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0; len],
            format,
        }
    }

    /// Encode real values element by element.
    pub fn from_reals(
        shape: Vec<usize>,
        values: &[f64],
        format: DfpFormat,
        rounding: RoundMode,
    ) -> Result<Self, DfpError> {
        let data = values
            .iter()
            .map(|&x| encode_int(x, format, rounding) as i32)
            .collect();
        Self::new(shape, data, format)
    }

    pub fn to_reals(&self) -> Vec<f64> {
        let ulp = self.format.ulp();
        self.data.iter().map(|&v| v as f64 * ulp).collect()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn format(&self) -> DfpFormat {
        self.format
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn value(&self, index: usize) -> DfpValue {
        DfpValue::from_int(self.data[index] as i64, self.format)
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<i32>, format: DfpFormat) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            format,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const RM: RoundMode = RoundMode::HalfAwayFromZero;

    #[test]
    fn encode_examples() {
        let v = encode(0.5, DfpFormat::q8(7), RM);
        assert_eq!((v.sign_bit(), v.magnitude()), (0, 64));
        assert_eq!(decode(v), 0.5);
        assert_eq!(encode(5.0, DfpFormat::q8(0), RM).to_int(), 5);
        let sat = encode(1.5, DfpFormat::q8(7), RM);
        assert_eq!(sat.magnitude(), 127);
        assert_eq!(decode(sat), 0.9921875);
    }

    #[test]
    fn saturation_matches_exhaustive_code_scan() {
        let fmt = DfpFormat::q8(7);
        let largest = (0u8..=1)
            .flat_map(|s| (0u32..128).map(move |m| DfpValue::from_parts(s, m, fmt)))
            .map(decode)
            .fold(f64::MIN, f64::max);
        assert_eq!(largest, 0.9921875);
        assert_eq!(decode(encode(1.5, fmt, RM)), largest);
        assert_eq!(decode(encode(-1.5, fmt, RM)), -largest);
    }

    #[test]
    fn decode_examples() {
        let f7 = DfpFormat::q8(7);
        assert_eq!(decode(DfpValue::from_parts(0, 64, f7)), 0.5);
        assert_eq!(decode(DfpValue::from_parts(1, 64, f7)), -0.5);
        assert_eq!(decode(DfpValue::from_parts(0, 127, DfpFormat::q8(0))), 127.0);
    }

    #[test]
    fn negative_zero_is_normalized() {
        let v = DfpValue::from_parts(1, 0, DfpFormat::q8(3));
        assert_eq!(v.sign_bit(), 0);
        assert_eq!(encode(-0.001, DfpFormat::q8(3), RM).sign_bit(), 0);
    }

    #[test]
    fn bits_follow_the_sign_magnitude_formula() {
        let fmt = DfpFormat::q8(4);
        let v = encode(-3.3125, fmt, RM);
        let sum: u32 = (0..7).map(|i| (v.bit(i) as u32) << i).sum();
        let value = if v.sign_bit() == 1 { -1.0 } else { 1.0 } * 2f64.powi(-4) * sum as f64;
        assert_eq!(value, -3.3125);
    }

    #[test]
    fn calibration_examples() {
        let f = |m: f64| calibrate_fraction_length(&[0.1, -m, 0.0], 8).unwrap().frac();
        assert_eq!(f(0.9), 7);
        assert_eq!(f(3.0), 5);
        assert_eq!(f(1.0), 7);
        // 1.0 sits exactly at the top of the range and saturates one ulp short.
        assert_eq!(decode(encode(1.0, DfpFormat::q8(7), RM)), 0.9921875);
    }

    #[test]
    fn calibration_edge_cases() {
        assert_eq!(calibrate_fraction_length(&[0.0, -0.0], 8).unwrap().frac(), 7);
        assert_eq!(calibrate_fraction_length(&[], 8), Err(DfpError::EmptySamples));
        assert!(matches!(
            calibrate_fraction_length(&[1.0, f64::NAN], 8),
            Err(DfpError::NonFinite { index: 1, .. })
        ));
        assert!(matches!(
            calibrate_fraction_length(&[f64::INFINITY], 8),
            Err(DfpError::NonFinite { index: 0, .. })
        ));
        assert_eq!(calibrate_fraction_length(&[100.0], 8).unwrap().frac(), 0);
        assert_eq!(calibrate_fraction_length(&[200.0], 8).unwrap().frac(), -1);
        assert_eq!(calibrate_fraction_length(&[1e-9], 8).unwrap().frac(), 7 + 24);
    }

    #[test]
    fn requantize_examples() {
        assert_eq!(requantize(2048, 14, DfpFormat::q8(7), RM).to_int(), 16);
        assert_eq!(requantize(3, 1, DfpFormat::q8(0), RM).to_int(), 2);
        assert_eq!(requantize(-3, 1, DfpFormat::q8(0), RM).to_int(), -2);
        assert_eq!(requantize(100_000, 7, DfpFormat::q8(7), RM).to_int(), 127);
        assert_eq!(requantize(-100_000, 7, DfpFormat::q8(7), RM).to_int(), -127);
        assert_eq!(requantize(3, 1, DfpFormat::q8(0), RoundMode::HalfToEven).to_int(), 2);
        assert_eq!(requantize(5, 1, DfpFormat::q8(0), RoundMode::HalfToEven).to_int(), 2);
        assert_eq!(requantize(3, 1, DfpFormat::q8(0), RoundMode::TowardZero).to_int(), 1);
        // widening is an exact shift
        assert_eq!(requantize(3, 0, DfpFormat::q8(2), RM).to_int(), 12);
        assert_eq!(requantize(64, 0, DfpFormat::q8(2), RM).to_int(), 127);
    }

    #[test]
    fn invalid_bit_width() {
        assert_eq!(DfpFormat::new(1, 0), Err(DfpError::InvalidBitWidth(1)));
        assert_eq!(DfpFormat::new(33, 0), Err(DfpError::InvalidBitWidth(33)));
        assert!(DfpFormat::new(32, 0).is_ok());
    }

    #[test]
    fn tensor_rejects_out_of_range_codes() {
        let err = DfpTensor::new(vec![2], vec![1, 128], DfpFormat::q8(0)).unwrap_err();
        assert!(matches!(err, DfpError::OutOfRange { index: 1, .. }));
        assert!(DfpTensor::new(vec![3], vec![1, 2], DfpFormat::q8(0)).is_err());
    }

    fn formats() -> impl Strategy<Value = DfpFormat> {
        (2u32..=16, -8i32..=16).prop_map(|(b, f)| DfpFormat::new(b, f).unwrap())
    }

    proptest! {
        #[test]
        fn every_code_round_trips(fmt in formats(), mode in prop_oneof![
            Just(RoundMode::HalfAwayFromZero), Just(RoundMode::HalfToEven), Just(RoundMode::TowardZero)
        ]) {
            let max = fmt.max_int() as u32;
            for s in 0..=1u8 {
                for m in 0..=max.min(4096) {
                    let code = DfpValue::from_parts(s, m, fmt);
                    prop_assert_eq!(encode(decode(code), fmt, mode), code);
                }
            }
        }

        #[test]
        fn encode_is_monotone(fmt in formats(), a in -1e4f64..1e4, b in -1e4f64..1e4) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(decode(encode(lo, fmt, RM)) <= decode(encode(hi, fmt, RM)));
        }

        #[test]
        fn error_within_half_ulp(fmt in formats(), t in -1f64..1.0) {
            let x = t * fmt.max_value();
            let err = (decode(encode(x, fmt, RM)) - x).abs();
            prop_assert!(err <= fmt.ulp() / 2.0, "x={} err={}", x, err);
        }

        #[test]
        fn calibration_never_saturates_below_the_top_band(
            samples in prop::collection::vec(-1e3f64..1e3, 1..32), bits in 4u32..=16
        ) {
            let fmt = calibrate_fraction_length(&samples, bits).unwrap();
            let max_abs = samples.iter().fold(0f64, |m, x| m.max(x.abs()));
            // Only [2^k - ulp/2, 2^k] rounds past the largest code.
            let top = 2f64.powi(ceil_log2(max_abs.max(CALIBRATION_EPSILON)));
            if max_abs < top - fmt.ulp() / 2.0 {
                let code = encode(max_abs, fmt, RM);
                prop_assert!((decode(code) - max_abs).abs() <= fmt.ulp() / 2.0);
            } else {
                prop_assert_eq!(encode(max_abs, fmt, RM).magnitude() as i64, fmt.max_int());
            }
        }

        #[test]
        fn requantize_matches_real_rounding(v in -1_000_000i64..1_000_000, src in 0i32..20, dst in -4i32..8) {
            prop_assume!(src >= dst);
            let fmt = DfpFormat::q8(dst);
            let real = v as f64 * 2f64.powi(-src);
            prop_assert_eq!(requantize(v, src, fmt, RM), encode(real, fmt, RM));
        }
    }
}
