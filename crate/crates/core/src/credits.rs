//! Fixed-point credit amounts.
//!
//! Credits are stored as an unsigned count of micro-credits (six fractional
//! digits), so that ledger conservation checks are exact.

use std::fmt;
use std::iter::Sum;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Number of micro-credits in one credit.
pub const MICROS_PER_CREDIT: u64 = 1_000_000;

/// A non-negative amount of credits with six fractional digits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Credits(u64);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CreditsParseError {
    #[error("empty credit amount")]
    Empty,
    #[error("invalid credit amount `{0}`")]
    Invalid(String),
    #[error("credit amount `{0}` has more than six fractional digits")]
    TooPrecise(String),
    #[error("credit amount `{0}` overflows")]
    Overflow(String),
}

impl Credits {
    pub const ZERO: Credits = Credits(0);

    pub const fn from_micros(micros: u64) -> Self {
        Credits(micros)
    }

    pub const fn from_whole(credits: u64) -> Self {
        Credits(credits * MICROS_PER_CREDIT)
    }

    /// Rounds a float to the nearest micro-credit. Returns `None` for
    /// negative, non-finite, or out-of-range input.
    pub fn from_f64(value: f64) -> Option<Self> {
        if !value.is_finite() || value < 0.0 {
            return None;
        }
        let micros = (value * MICROS_PER_CREDIT as f64).round();
        if micros >= u64::MAX as f64 {
            return None;
        }
        Some(Credits(micros as u64))
    }

    pub const fn micros(self) -> u64 {
        self.0
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / MICROS_PER_CREDIT as f64
    }

    pub const fn is_zero(self) -> bool {
        self.0 == 0
    }

    pub fn checked_add(self, rhs: Credits) -> Option<Credits> {
        self.0.checked_add(rhs.0).map(Credits)
    }

    pub fn checked_sub(self, rhs: Credits) -> Option<Credits> {
        self.0.checked_sub(rhs.0).map(Credits)
    }

    pub fn saturating_sub(self, rhs: Credits) -> Credits {
        Credits(self.0.saturating_sub(rhs.0))
    }

    pub fn saturating_add(self, rhs: Credits) -> Credits {
        Credits(self.0.saturating_add(rhs.0))
    }

    pub fn checked_mul(self, factor: u64) -> Option<Credits> {
        self.0.checked_mul(factor).map(Credits)
    }
}

impl fmt::Display for Credits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}.{:06}",
            self.0 / MICROS_PER_CREDIT,
            self.0 % MICROS_PER_CREDIT
        )
    }
}

impl FromStr for Credits {
    type Err = CreditsParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() {
            return Err(CreditsParseError::Empty);
        }
        let (whole, frac) = match s.split_once('.') {
            Some((w, f)) => (w, Some(f)),
            None => (s, None),
        };
        let digits = |part: &str| !part.is_empty() && part.bytes().all(|b| b.is_ascii_digit());
        if !digits(whole) || frac.is_some_and(|f| !digits(f)) {
            return Err(CreditsParseError::Invalid(s.to_string()));
        }
        let frac = frac.unwrap_or("");
        if frac.len() > 6 {
            return Err(CreditsParseError::TooPrecise(s.to_string()));
        }
        let whole: u64 = whole
            .parse()
            .map_err(|_| CreditsParseError::Overflow(s.to_string()))?;
        let mut frac_micros = 0u64;
        for (i, b) in frac.bytes().enumerate() {
            frac_micros += u64::from(b - b'0') * 10u64.pow(5 - i as u32);
        }
        whole
            .checked_mul(MICROS_PER_CREDIT)
            .and_then(|w| w.checked_add(frac_micros))
            .map(Credits)
            .ok_or_else(|| CreditsParseError::Overflow(s.to_string()))
    }
}

impl Serialize for Credits {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Credits {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Sum for Credits {
    fn sum<I: Iterator<Item = Credits>>(iter: I) -> Self {
        Credits(iter.map(|c| c.0).sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn display_and_parse() {
        assert_eq!(Credits::from_whole(3).to_string(), "3.000000");
        assert_eq!(Credits::from_micros(1_500_001).to_string(), "1.500001");
        assert_eq!("2.5".parse::<Credits>().unwrap(), Credits::from_micros(2_500_000));
        assert_eq!("0.000001".parse::<Credits>().unwrap(), Credits::from_micros(1));
        assert!(matches!("1.0000001".parse::<Credits>(), Err(CreditsParseError::TooPrecise(_))));
        assert!("-1".parse::<Credits>().is_err());
        assert!("".parse::<Credits>().is_err());
        assert!("1.".parse::<Credits>().is_err());
    }

    #[test]
    fn from_f64_rounds_to_micro() {
        assert_eq!(Credits::from_f64(0.1).unwrap().micros(), 100_000);
        assert_eq!(Credits::from_f64(2.3).unwrap().micros(), 2_300_000);
        assert!(Credits::from_f64(-0.5).is_none());
        assert!(Credits::from_f64(f64::NAN).is_none());
    }

    proptest! {
        #[test]
        fn string_round_trip(micros in 0u64..u64::MAX / 2) {
            let c = Credits::from_micros(micros);
            prop_assert_eq!(c.to_string().parse::<Credits>().unwrap(), c);
        }
    }
}
