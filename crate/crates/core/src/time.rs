//! Fixed-point simulated time.
//!
//! Time is stored as an integer count of micro-units (six fractional decimal
//! digits) so that event ordering is exact and identical across platforms.

use std::fmt;
use std::ops::{Add, Sub};
use std::str::FromStr;

use thiserror::Error;

/// Number of fractional decimal digits carried by [`SimTime`].
pub const FRACTION_DIGITS: u32 = 6;
const SCALE: i64 = 1_000_000;

/// A point (or span) of simulated time with six fractional digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(i64);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TimeParseError {
    #[error("empty decimal")]
    Empty,
    #[error("malformed decimal `{0}`")]
    Malformed(String),
    #[error("decimal `{0}` has more than {FRACTION_DIGITS} fractional digits")]
    TooPrecise(String),
    #[error("decimal `{0}` is out of range")]
    Overflow(String),
}

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_micros(micros: i64) -> Self {
        SimTime(micros)
    }

    pub const fn from_units(units: i64) -> Self {
        SimTime(units * SCALE)
    }

    pub const fn as_micros(self) -> i64 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / SCALE as f64
    }

    pub fn is_negative(self) -> bool {
        self.0 < 0
    }

    /// `self × factor`, saturating at the representable maximum.
    pub fn scale(self, factor: u64) -> SimTime {
        let factor = i64::try_from(factor).unwrap_or(i64::MAX);
        SimTime(self.0.saturating_mul(factor))
    }

    pub fn saturating_add(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_add(other.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl FromStr for SimTime {
    type Err = TimeParseError;

    /// Accepts `digits[.digits]` with at most six fractional digits.
    /// Signs, exponents and bare dots are rejected.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.is_empty() {
            return Err(TimeParseError::Empty);
        }
        let (int_part, frac_part) = match s.split_once('.') {
            Some((i, f)) => (i, Some(f)),
            None => (s, None),
        };
        let digits_only = |p: &str| !p.is_empty() && p.bytes().all(|b| b.is_ascii_digit());
        if !digits_only(int_part) || frac_part.is_some_and(|f| !digits_only(f)) {
            return Err(TimeParseError::Malformed(s.to_string()));
        }
        let frac = frac_part.unwrap_or("");
        if frac.len() > FRACTION_DIGITS as usize {
            return Err(TimeParseError::TooPrecise(s.to_string()));
        }
        let overflow = || TimeParseError::Overflow(s.to_string());
        let whole: i64 = int_part.parse().map_err(|_| overflow())?;
        let mut frac_micros: i64 = 0;
        for (i, b) in frac.bytes().enumerate() {
            frac_micros += i64::from(b - b'0') * 10_i64.pow(FRACTION_DIGITS - 1 - i as u32);
        }
        whole.checked_mul(SCALE).and_then(|w| w.checked_add(frac_micros)).map(SimTime).ok_or_else(overflow)
    }
}

impl fmt::Display for SimTime {
    /// Renders without trailing zeros: `10`, `2.5`, `0.000001`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        let whole = abs / SCALE as u64;
        let frac = abs % SCALE as u64;
        if frac == 0 {
            write!(f, "{sign}{whole}")
        } else {
            let digits = format!("{frac:06}");
            write!(f, "{sign}{whole}.{}", digits.trim_end_matches('0'))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_and_renders_canonically() {
        let t: SimTime = "10.500".parse().unwrap();
        assert_eq!(t.as_micros(), 10_500_000);
        assert_eq!(t.to_string(), "10.5");
        assert_eq!("3".parse::<SimTime>().unwrap().to_string(), "3");
        assert_eq!("0.000001".parse::<SimTime>().unwrap().as_micros(), 1);
        assert_eq!(SimTime::from_micros(-2_500_000).to_string(), "-2.5");
    }

    #[test]
    fn rejects_excess_precision_and_junk() {
        assert!(matches!("1.0000001".parse::<SimTime>(), Err(TimeParseError::TooPrecise(_))));
        for bad in ["", ".5", "5.", "-1", "1e3", "1.2.3", " 1"] {
            assert!(bad.parse::<SimTime>().is_err(), "{bad:?} should not parse");
        }
    }

    proptest! {
        #[test]
        fn display_parse_roundtrip(micros in 0_i64..1_000_000_000_000) {
            let t = SimTime::from_micros(micros);
            prop_assert_eq!(t.to_string().parse::<SimTime>().unwrap(), t);
        }
    }
}
