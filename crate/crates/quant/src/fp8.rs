//! Software E4M3: 1 sign bit, 4 exponent bits (bias 7), 3 mantissa bits,
//! no infinities, a single NaN pattern per sign (`S.1111.111`).

use crate::error::{QuantError, Result};

/// Largest finite magnitude.
pub const E4M3_MAX: f32 = 448.0;
/// Smallest positive subnormal, 2⁻⁹.
pub const E4M3_MIN_SUBNORMAL: f32 = 1.0 / 512.0;
const MIN_NORMAL_EXP: i32 = -6;
const MANTISSA_BITS: i32 = 3;

/// Marker type for the E4M3 format.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Fp8E4M3;

impl Fp8E4M3 {
    /// Value of an 8-bit code, `None` for the two NaN codes.
    pub fn decode(code: u8) -> Option<f32> {
        let sign = if code & 0x80 != 0 { -1.0 } else { 1.0 };
        let exp = ((code >> 3) & 0x0F) as i32;
        let man = (code & 0x07) as f32;
        if exp == 0x0F && code & 0x07 == 0x07 {
            return None;
        }
        let mag = if exp == 0 {
            man / 8.0 * 2f32.powi(MIN_NORMAL_EXP)
        } else {
            (1.0 + man / 8.0) * 2f32.powi(exp - 7)
        };
        Some(sign * mag)
    }

    /// Code of the nearest representable value (round to nearest, ties to
    /// even mantissa; saturating at ±448).
    pub fn encode(x: f32) -> Result<u8> {
        let r = round_e4m3(x)?;
        let sign = if r.is_sign_negative() { 0x80u8 } else { 0 };
        let a = r.abs();
        if a == 0.0 {
            return Ok(sign);
        }
        let e = (a.log2().floor() as i32).max(MIN_NORMAL_EXP);
        let code = if a < 2f32.powi(MIN_NORMAL_EXP) {
            (a / E4M3_MIN_SUBNORMAL).round() as u8
        } else {
            let man = (a / 2f32.powi(e) - 1.0) * 8.0;
            (((e + 7) as u8) << 3) | man.round() as u8
        };
        Ok(sign | code)
    }

    /// All finite values, one per code (so ±0 both appear).
    pub fn grid() -> Vec<(u8, f32)> {
        (0..=255u8)
            .filter_map(|c| Self::decode(c).map(|v| (c, v)))
            .collect()
    }
}

/// Round to the nearest E4M3 value, ties to even; magnitudes beyond 448 clamp.
pub fn round_e4m3(x: f32) -> Result<f32> {
    if !x.is_finite() {
        return Err(QuantError::NonFinite(x));
    }
    let a = x.abs() as f64;
    if a >= E4M3_MAX as f64 {
        return Ok(E4M3_MAX.copysign(x));
    }
    if a == 0.0 {
        return Ok(x);
    }
    let e = (a.log2().floor() as i32).max(MIN_NORMAL_EXP);
    let quantum = 2f64.powi(e - MANTISSA_BITS);
    let q = (a / quantum).round_ties_even() * quantum;
    Ok((q.min(E4M3_MAX as f64) as f32).copysign(x))
}

/// `round_e4m3(x / scale) · scale`.
pub fn fp8_qdq(x: f32, scale: f32) -> Result<f32> {
    check_scale(scale)?;
    Ok(round_e4m3(x / scale)? * scale)
}

/// [`fp8_qdq`] over a slice.
pub fn fp8_qdq_slice(xs: &[f32], scale: f32) -> Result<Vec<f32>> {
    check_scale(scale)?;
    xs.iter()
        .map(|&x| Ok(round_e4m3(x / scale)? * scale))
        .collect()
}

pub(crate) fn check_scale(scale: f32) -> Result<()> {
    if scale > 0.0 && scale.is_finite() {
        Ok(())
    } else {
        Err(QuantError::InvalidScale(scale))
    }
}

/// Scale that maps `absmax` onto the top of the grid; 1 for an all-zero tensor.
pub fn scale_for(absmax: f32) -> f32 {
    if absmax > 0.0 {
        absmax / E4M3_MAX
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        assert_eq!(round_e4m3(0.0).unwrap(), 0.0);
        assert_eq!(round_e4m3(448.0).unwrap(), 448.0);
        assert_eq!(round_e4m3(1e6).unwrap(), 448.0);
        assert_eq!(round_e4m3(-500.0).unwrap(), -448.0);
        assert_eq!(Fp8E4M3::decode(0x01), Some(E4M3_MIN_SUBNORMAL));
        assert_eq!(Fp8E4M3::decode(0x7E), Some(448.0));
        assert_eq!(Fp8E4M3::decode(0x7F), None);
        assert!(round_e4m3(f32::NAN).is_err());
        assert!(fp8_qdq(1.0, 0.0).is_err());
    }

    #[test]
    fn ties_go_to_even() {
        // 1.0625 sits halfway between 1.0 (mantissa 0) and 1.125 (mantissa 1)
        assert_eq!(round_e4m3(1.0625).unwrap(), 1.0);
        // 1.1875 sits between 1.125 (odd) and 1.25 (even)
        assert_eq!(round_e4m3(1.1875).unwrap(), 1.25);
    }
}
