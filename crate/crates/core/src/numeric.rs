//! Exact score arithmetic.
//!
//! Alignment scores and verdict thresholds are kept as rationals so the
//! triage comparison never rounds; reported accuracies are fixed-point
//! hundredths of a percent with round-half-up, matching two-decimal tables.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NumericError {
    #[error("zero denominator")]
    ZeroDenominator,
    #[error("cannot parse `{0}` as a ratio")]
    BadRatio(String),
    #[error("cannot parse `{0}` as a percentage")]
    BadPercent(String),
}

/// A non-negative rational. Comparison is exact (cross-multiplication), so
/// a score of 4/5 against a threshold of 0.8 is an equality, not a float
/// coincidence.
#[derive(Debug, Clone, Copy)]
pub struct Ratio {
    num: u32,
    den: u32,
}

impl Ratio {
    pub fn new(num: u32, den: u32) -> Result<Self, NumericError> {
        if den == 0 {
            return Err(NumericError::ZeroDenominator);
        }
        Ok(Self { num, den })
    }

    pub const ONE: Ratio = Ratio { num: 1, den: 1 };

    pub fn numerator(&self) -> u32 {
        self.num
    }

    pub fn denominator(&self) -> u32 {
        self.den
    }

    pub fn is_one(&self) -> bool {
        self.num == self.den
    }

    pub fn as_f64(&self) -> f64 {
        f64::from(self.num) / f64::from(self.den)
    }

    fn reduced(&self) -> (u32, u32) {
        let g = gcd(self.num.max(1), self.den);
        if self.num == 0 {
            (0, 1)
        } else {
            (self.num / g, self.den / g)
        }
    }
}

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

impl PartialEq for Ratio {
    fn eq(&self, other: &Self) -> bool {
        u64::from(self.num) * u64::from(other.den) == u64::from(other.num) * u64::from(self.den)
    }
}

impl Eq for Ratio {}

impl PartialOrd for Ratio {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ratio {
    fn cmp(&self, other: &Self) -> Ordering {
        (u64::from(self.num) * u64::from(other.den))
            .cmp(&(u64::from(other.num) * u64::from(self.den)))
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (n, d) = self.reduced();
        if d == 1 {
            write!(f, "{n}")
        } else {
            write!(f, "{n}/{d}")
        }
    }
}

impl FromStr for Ratio {
    type Err = NumericError;

    /// Accepts `"1"`, `"4/5"`, and decimal text such as `"0.8"` (parsed
    /// exactly as 8/10, not through a float).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bad = || NumericError::BadRatio(s.to_string());
        if let Some((n, d)) = s.split_once('/') {
            let num: u32 = n.trim().parse().map_err(|_| bad())?;
            let den: u32 = d.trim().parse().map_err(|_| bad())?;
            return Ratio::new(num, den);
        }
        if let Some((whole, frac)) = s.split_once('.') {
            if frac.is_empty() || frac.len() > 6 || !frac.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            let whole: u32 = if whole.is_empty() {
                0
            } else {
                whole.parse().map_err(|_| bad())?
            };
            let frac_val: u32 = frac.parse().map_err(|_| bad())?;
            let den = 10u32.pow(frac.len() as u32);
            let num = whole
                .checked_mul(den)
                .and_then(|w| w.checked_add(frac_val))
                .ok_or_else(bad)?;
            return Ratio::new(num, den);
        }
        let num: u32 = s.parse().map_err(|_| bad())?;
        Ratio::new(num, 1)
    }
}

impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// An accuracy percentage held as integer hundredths (77.03% is 7703).
/// All rounding is half-up at the second decimal, the same convention the
/// published tables use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Percent(i64);

impl Percent {
    pub fn from_hundredths(h: i64) -> Self {
        Percent(h)
    }

    pub fn hundredths(&self) -> i64 {
        self.0
    }

    /// 100 * correct / total, rounded half-up to two decimals.
    pub fn from_counts(correct: u64, total: u64) -> Result<Self, NumericError> {
        if total == 0 {
            return Err(NumericError::ZeroDenominator);
        }
        let scaled = correct as u128 * 10_000;
        let total = total as u128;
        let rounded = (2 * scaled + total) / (2 * total);
        Ok(Percent(rounded as i64))
    }

    /// Arithmetic mean of already-rounded percentages, rounded half-up again.
    /// This is precisely how the aggregate tables are derived from per-cell
    /// values.
    pub fn mean(values: &[Percent]) -> Result<Self, NumericError> {
        if values.is_empty() {
            return Err(NumericError::ZeroDenominator);
        }
        let sum: i64 = values.iter().map(|p| p.0).sum();
        let k = values.len() as i64;
        Ok(Percent((2 * sum + k) / (2 * k)))
    }

    pub fn as_f64(&self) -> f64 {
        self.0 as f64 / 100.0
    }
}

impl fmt::Display for Percent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}%", self.0 / 100, (self.0 % 100).abs())
    }
}

impl FromStr for Percent {
    type Err = NumericError;

    /// Accepts `"77.03"`, `"77.03%"`, `"100"`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().trim_end_matches('%');
        let bad = || NumericError::BadPercent(s.to_string());
        let (whole, frac) = match s.split_once('.') {
            Some((w, f)) => (w, f),
            None => (s, ""),
        };
        if frac.len() > 2 || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let whole: i64 = whole.parse().map_err(|_| bad())?;
        let frac_val: i64 = if frac.is_empty() {
            0
        } else {
            frac.parse().map_err(|_| bad())?
        };
        let frac_scaled = frac_val * if frac.len() == 1 { 10 } else { 1 };
        Ok(Percent(whole * 100 + frac_scaled))
    }
}

impl Serialize for Percent {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.to_string().trim_end_matches('%'))
    }
}

impl<'de> Deserialize<'de> for Percent {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(D::Error::custom)
    }
}
