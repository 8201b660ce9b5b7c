//! Action-unit vectors and the delta string grammar.
//!
//! The twelve pseudo-AUs are, in index order:
//! AU1, AU2, AU4, AU6, AU9, AU12, AU15, AU17, AU20, AU25, AU26, AU43.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_AUS: usize = 12;

/// Upper bound of the absolute intensity scale.
pub const AU_MAX: f64 = 5.0;

/// Largest delta magnitude accepted at inference time.
pub const DELTA_INFERENCE_CAP: f64 = 10.0;

/// FACS numbers of the twelve pseudo-AUs, in vector order.
pub const AU_CODES: [u32; NUM_AUS] = [1, 2, 4, 6, 9, 12, 15, 17, 20, 25, 26, 43];

pub const AU_NAMES: [&str; NUM_AUS] = [
    "Inner Brow Raiser",
    "Outer Brow Raiser",
    "Brow Lowerer",
    "Cheek Raiser",
    "Nose Wrinkler",
    "Lip Corner Puller",
    "Lip Corner Depressor",
    "Chin Raiser",
    "Lip Stretcher",
    "Lips Part",
    "Jaw Drop",
    "Eyes Closed",
];

/// Vector index of each AU.
pub mod idx {
    pub const AU1: usize = 0;
    pub const AU2: usize = 1;
    pub const AU4: usize = 2;
    pub const AU6: usize = 3;
    pub const AU9: usize = 4;
    pub const AU12: usize = 5;
    pub const AU15: usize = 6;
    pub const AU17: usize = 7;
    pub const AU20: usize = 8;
    pub const AU25: usize = 9;
    pub const AU26: usize = 10;
    pub const AU43: usize = 11;
}

/// Index of an AU given its FACS number (e.g. `12` for AU12).
pub fn index_of(code: u32) -> Option<usize> {
    AU_CODES.iter().position(|&c| c == code)
}

pub fn label(index: usize) -> String {
    format!("AU{}", AU_CODES[index])
}

/// Absolute AU intensities, each clamped to `[0, 5]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct AuVector([f64; NUM_AUS]);

impl AuVector {
    pub fn zeros() -> Self {
        Self([0.0; NUM_AUS])
    }

    /// Builds a vector, clamping every component into `[0, 5]`.
    pub fn new(values: [f64; NUM_AUS]) -> Result<Self> {
        let mut out = [0.0; NUM_AUS];
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::validation(label(i), "intensity must be finite"));
            }
            out[i] = v.clamp(0.0, AU_MAX);
        }
        Ok(Self(out))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let arr: [f64; NUM_AUS] = values.try_into().map_err(|_| {
            Error::validation("aus", format!("expected {NUM_AUS} values, got {}", values.len()))
        })?;
        Self::new(arr)
    }

    pub fn values(&self) -> &[f64; NUM_AUS] {
        &self.0
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }

    /// `self + delta`, clamped back into the intensity range.
    pub fn apply(&self, delta: &AuDelta) -> AuVector {
        let mut out = [0.0; NUM_AUS];
        for (i, o) in out.iter_mut().enumerate() {
            *o = (self.0[i] + delta.0[i]).clamp(0.0, AU_MAX);
        }
        AuVector(out)
    }

    /// Signed change `target - self`; negative components suppress an AU.
    pub fn delta_to(&self, target: &AuVector) -> AuDelta {
        let mut out = [0.0; NUM_AUS];
        for (i, o) in out.iter_mut().enumerate() {
            *o = target.0[i] - self.0[i];
        }
        AuDelta(out)
    }
}

impl TryFrom<Vec<f64>> for AuVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::from_slice(&v)
    }
}

impl From<AuVector> for Vec<f64> {
    fn from(v: AuVector) -> Self {
        v.0.to_vec()
    }
}

/// Signed AU intensity changes. Training deltas stay in `[-5, 5]`; the
/// inference API accepts magnitudes up to [`DELTA_INFERENCE_CAP`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct AuDelta([f64; NUM_AUS]);

impl AuDelta {
    pub fn zeros() -> Self {
        Self([0.0; NUM_AUS])
    }

    pub fn new(values: [f64; NUM_AUS]) -> Result<Self> {
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::validation(label(i), "delta must be finite"));
            }
        }
        Ok(Self(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let arr: [f64; NUM_AUS] = values.try_into().map_err(|_| {
            Error::validation("au_delta", format!("expected {NUM_AUS} values, got {}", values.len()))
        })?;
        Self::new(arr)
    }

    /// A delta with a single nonzero component.
    pub fn single(index: usize, value: f64) -> Self {
        let mut v = [0.0; NUM_AUS];
        v[index] = value;
        Self(v)
    }

    pub fn values(&self) -> &[f64; NUM_AUS] {
        &self.0
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Rejects deltas whose magnitude exceeds the inference cap.
    pub fn check_inference_range(&self) -> Result<()> {
        for (i, v) in self.0.iter().enumerate() {
            if v.abs() > DELTA_INFERENCE_CAP {
                return Err(Error::validation(
                    label(i),
                    format!("|{v}| exceeds the inference cap of {DELTA_INFERENCE_CAP}"),
                ));
            }
        }
        Ok(())
    }

    /// Parses `"AU4=-6,AU12=+2"`. Unlisted AUs are zero; whitespace around
    /// tokens is ignored; an empty string is the zero delta.
    pub fn parse(s: &str) -> Result<Self> {
        let mut out = [0.0; NUM_AUS];
        let mut seen = [false; NUM_AUS];
        for item in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let (name, value) = item
                .split_once('=')
                .ok_or_else(|| Error::DeltaParse(format!("`{item}` is not of the form AU<n>=<value>")))?;
            let name = name.trim();
            let code = name
                .strip_prefix("AU")
                .or_else(|| name.strip_prefix("au"))
                .and_then(|n| n.parse::<u32>().ok())
                .ok_or_else(|| Error::DeltaParse(format!("`{name}` is not an AU name")))?;
            let i = index_of(code).ok_or_else(|| Error::DeltaParse(format!("AU{code} is not one of the supported AUs")))?;
            if seen[i] {
                return Err(Error::DeltaParse(format!("AU{code} listed twice")));
            }
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::DeltaParse(format!("`{}` is not a decimal number", value.trim())))?;
            if !value.is_finite() {
                return Err(Error::DeltaParse(format!("AU{code} value must be finite")));
            }
            seen[i] = true;
            out[i] = value;
        }
        Ok(Self(out))
    }

    /// Inverse of [`AuDelta::parse`] listing only nonzero components.
    pub fn to_delta_string(&self) -> String {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| format!("{}={:+}", label(i), v))
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl std::ops::Add for AuDelta {
    type Output = AuDelta;
    fn add(self, rhs: AuDelta) -> AuDelta {
        let mut out = self.0;
        for (o, r) in out.iter_mut().zip(rhs.0.iter()) {
            *o += r;
        }
        AuDelta(out)
    }
}

impl TryFrom<Vec<f64>> for AuDelta {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::from_slice(&v)
    }
}

impl From<AuDelta> for Vec<f64> {
    fn from(v: AuDelta) -> Self {
        v.0.to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vector_clamps_on_construction() {
        let mut raw = [1.0; NUM_AUS];
        raw[0] = -2.0;
        raw[1] = 7.5;
        let v = AuVector::new(raw).unwrap();
        assert_eq!(v.get(0), 0.0);
        assert_eq!(v.get(1), 5.0);
        assert_eq!(v.get(2), 1.0);
    }

    #[test]
    fn non_finite_rejected() {
        let mut raw = [0.0; NUM_AUS];
        raw[3] = f64::NAN;
        assert!(AuVector::new(raw).is_err());
        assert!(AuDelta::new(raw).is_err());
        assert!(AuVector::from_slice(&[0.0; 11]).is_err());
    }

    #[test]
    fn delta_sign_is_target_minus_source() {
        let mut a = [0.0; NUM_AUS];
        let mut b = [0.0; NUM_AUS];
        a[idx::AU12] = 1.0;
        b[idx::AU12] = 4.0;
        let d = AuVector::new(a).unwrap().delta_to(&AuVector::new(b).unwrap());
        assert_eq!(d.get(idx::AU12), 3.0);
    }

    #[test]
    fn parse_single_entry() {
        let d = AuDelta::parse("AU12=+3").unwrap();
        assert_eq!(d.values().iter().filter(|v| **v != 0.0).count(), 1);
        assert_eq!(d.get(idx::AU12), 3.0);
    }

    #[test]
    fn parse_multiple_and_whitespace() {
        let d = AuDelta::parse(" AU4=-6 , AU12=+2").unwrap();
        assert_eq!(d.get(idx::AU4), -6.0);
        assert_eq!(d.get(idx::AU12), 2.0);
        assert!(AuDelta::parse("").unwrap().is_zero());
    }

    #[test]
    fn parse_errors() {
        assert!(AuDelta::parse("AU5=1").is_err());
        assert!(AuDelta::parse("AU12").is_err());
        assert!(AuDelta::parse("AU12=abc").is_err());
        assert!(AuDelta::parse("AU12=1,AU12=2").is_err());
        assert!(AuDelta::parse("XY12=1").is_err());
    }

    #[test]
    fn inference_cap() {
        assert!(AuDelta::single(idx::AU4, -10.0).check_inference_range().is_ok());
        assert!(AuDelta::single(idx::AU4, -10.5).check_inference_range().is_err());
    }

    #[test]
    fn delta_string_roundtrip() {
        let d = AuDelta::parse("AU4=-6,AU12=2.5").unwrap();
        assert_eq!(AuDelta::parse(&d.to_delta_string()).unwrap(), d);
    }
}
