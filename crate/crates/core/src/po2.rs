//! Power-of-two weights and their packed 4-bit storage.
//!
//! A weight is stored as `s · 2^e` with `e ∈ [-7, 0]`. Each weight takes one
//! nibble: bit 3 is the sign (set for negative) and bits 2..0 hold `-e`.
//! Two weights share a byte, the first one in the low nibble.

use thiserror::Error;

/// Smallest exponent; inputs are 8 bits wide so further right shifts discard everything.
pub const MIN_EXPONENT: i8 = -7;
pub const MAX_EXPONENT: i8 = 0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Po2Error {
    #[error("cannot quantize non-finite weight {0}")]
    NonFinite(f64),
    #[error("blob of {count} weights needs {expected} bytes, got {actual}")]
    LengthMismatch {
        count: usize,
        expected: usize,
        actual: usize,
    },
    #[error("exponent {0} outside [-7, 0]")]
    InvalidExponent(i8),
}

/// A signed power-of-two weight `s · 2^e`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Po2Weight {
    negative: bool,
    exponent: i8,
}

impl Po2Weight {
    pub fn new(negative: bool, exponent: i8) -> Result<Self, Po2Error> {
        if !(MIN_EXPONENT..=MAX_EXPONENT).contains(&exponent) {
            return Err(Po2Error::InvalidExponent(exponent));
        }
        Ok(Self { negative, exponent })
    }

    pub fn is_negative(&self) -> bool {
        self.negative
    }

    /// `+1` or `-1`.
    pub fn sign(&self) -> i64 {
        if self.negative {
            -1
        } else {
            1
        }
    }

    pub fn exponent(&self) -> i8 {
        self.exponent
    }

    /// 4-bit storage code.
    pub fn code(&self) -> u8 {
        ((self.negative as u8) << 3) | (-self.exponent) as u8
    }

    pub fn from_code(code: u8) -> Self {
        Self {
            negative: code & 0x8 != 0,
            exponent: -((code & 0x7) as i8),
        }
    }
}

/// Round `w` to the nearest signed power of two in the log domain.
///
/// `e = clamp(round(log2 |w|), -7, 0)` with ties away from zero. Zero has no
/// code of its own and maps to `+2^-7`; magnitudes above one clamp to `e = 0`.
pub fn quantize_po2(w: f64) -> Result<Po2Weight, Po2Error> {
    if !w.is_finite() {
        return Err(Po2Error::NonFinite(w));
    }
    if w == 0.0 {
        return Ok(Po2Weight {
            negative: false,
            exponent: MIN_EXPONENT,
        });
    }
    let e = w.abs().log2().round();
    let exponent = e.clamp(MIN_EXPONENT as f64, MAX_EXPONENT as f64) as i8;
    Ok(Po2Weight {
        negative: w < 0.0,
        exponent,
    })
}

pub fn dequantize_po2(p: Po2Weight) -> f64 {
    p.sign() as f64 * 2f64.powi(p.exponent as i32)
}

/// Quantize a slice, failing on the first non-finite entry.
pub fn quantize_all(weights: &[f64]) -> Result<Vec<Po2Weight>, Po2Error> {
    weights.iter().map(|&w| quantize_po2(w)).collect()
}

/// Packed nibble buffer holding `count` weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Po2Blob {
    count: usize,
    bytes: Vec<u8>,
}

impl Po2Blob {
    pub fn from_bytes(count: usize, bytes: Vec<u8>) -> Result<Self, Po2Error> {
        let expected = packed_len(count);
        if bytes.len() != expected {
            return Err(Po2Error::LengthMismatch {
                count,
                expected,
                actual: bytes.len(),
            });
        }
        Ok(Self { count, bytes })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

/// Bytes needed for `count` packed weights.
pub fn packed_len(count: usize) -> usize {
    count.div_ceil(2)
}

pub fn pack4(weights: &[Po2Weight]) -> Po2Blob {
    let bytes = weights
        .chunks(2)
        .map(|pair| {
            let lo = pair[0].code();
            let hi = pair.get(1).map_or(0, Po2Weight::code);
            lo | (hi << 4)
        })
        .collect();
    Po2Blob {
        count: weights.len(),
        bytes,
    }
}

pub fn unpack4(blob: &Po2Blob) -> Result<Vec<Po2Weight>, Po2Error> {
    let expected = packed_len(blob.count);
    if blob.bytes.len() != expected {
        return Err(Po2Error::LengthMismatch {
            count: blob.count,
            expected,
            actual: blob.bytes.len(),
        });
    }
    Ok(blob
        .bytes
        .iter()
        .flat_map(|b| [Po2Weight::from_code(b & 0x0F), Po2Weight::from_code(b >> 4)])
        .take(blob.count)
        .collect())
}
