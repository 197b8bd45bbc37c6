//! Time, duration, and rate types.
//!
//! Simulated time is integer microseconds. Durations and rates in scenario
//! files are strings with explicit units (`"150us"`, `"2ms"`, `"10Mbps"`) so
//! a bare number can never be misread at a different scale. Trace and report
//! output uses plain integers in fields whose names carry the unit (`*_us`).

use std::fmt;
use std::ops::{Add, AddAssign, Sub};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::UnitParseError;

/// A point in simulated (or node-local) time, in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn micros(self) -> u64 {
        self.0
    }

    pub fn saturating_sub(self, other: SimTime) -> SimDuration {
        SimDuration(self.0.saturating_sub(other.0))
    }
}

impl Add<SimDuration> for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimDuration) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign<SimDuration> for SimTime {
    fn add_assign(&mut self, rhs: SimDuration) {
        self.0 += rhs.0;
    }
}

impl Sub for SimTime {
    type Output = SimDuration;
    fn sub(self, rhs: SimTime) -> SimDuration {
        SimDuration(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}us", self.0)
    }
}

/// A span of time in microseconds. Parses from `"<n>us" | "<n>ms" | "<n>s" | "<n>min"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimDuration(pub u64);

impl SimDuration {
    pub const ZERO: SimDuration = SimDuration(0);

    pub const fn micros(self) -> u64 {
        self.0
    }

    pub const fn from_micros(us: u64) -> Self {
        SimDuration(us)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimDuration(ms * 1_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimDuration(s * 1_000_000)
    }

    pub fn saturating_sub(self, other: SimDuration) -> SimDuration {
        SimDuration(self.0.saturating_sub(other.0))
    }
}

impl Add for SimDuration {
    type Output = SimDuration;
    fn add(self, rhs: SimDuration) -> SimDuration {
        SimDuration(self.0 + rhs.0)
    }
}

impl AddAssign for SimDuration {
    fn add_assign(&mut self, rhs: SimDuration) {
        self.0 += rhs.0;
    }
}

impl fmt::Display for SimDuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}us", self.0)
    }
}

impl FromStr for SimDuration {
    type Err = UnitParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (value, unit) = split_unit(s)?;
        let scale = match unit {
            "us" => 1,
            "ms" => 1_000,
            "s" => 1_000_000,
            "min" => 60_000_000,
            other => {
                return Err(UnitParseError::new(
                    s,
                    format!("unknown duration unit {other:?}; expected us/ms/s/min"),
                ))
            }
        };
        scaled_integer(s, value, scale).map(SimDuration)
    }
}

impl Serialize for SimDuration {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for SimDuration {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Link or capacity rate in bits per second. Parses from
/// `"<n>bps" | "<n>kbps" | "<n>Mbps" | "<n>Gbps"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Rate(pub u64);

impl Rate {
    pub const fn bits_per_sec(self) -> u64 {
        self.0
    }

    /// Wire time for `bytes` at this rate, rounded up to whole microseconds.
    pub fn service_time(self, bytes: u32) -> SimDuration {
        let bits = bytes as u64 * 8;
        SimDuration((bits * 1_000_000).div_ceil(self.0))
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}bps", self.0)
    }
}

impl FromStr for Rate {
    type Err = UnitParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (value, unit) = split_unit(s)?;
        let scale = match unit {
            "bps" => 1,
            "kbps" => 1_000,
            "Mbps" => 1_000_000,
            "Gbps" => 1_000_000_000,
            other => {
                return Err(UnitParseError::new(
                    s,
                    format!("unknown rate unit {other:?}; expected bps/kbps/Mbps/Gbps"),
                ))
            }
        };
        let rate = scaled_integer(s, value, scale).map(Rate)?;
        if rate.0 == 0 {
            return Err(UnitParseError::new(s, "rate must be positive"));
        }
        Ok(rate)
    }
}

impl Serialize for Rate {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Rate {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn split_unit(s: &str) -> Result<(&str, &str), UnitParseError> {
    let s = s.trim();
    let digits_end = s
        .find(|c: char| !(c.is_ascii_digit() || c == '.'))
        .ok_or_else(|| UnitParseError::new(s, "missing unit suffix"))?;
    if digits_end == 0 {
        return Err(UnitParseError::new(s, "missing numeric value"));
    }
    Ok((&s[..digits_end], &s[digits_end..]))
}

/// Multiply a possibly fractional decimal by `scale`, requiring the result to
/// land on an integer (no silent sub-unit truncation).
fn scaled_integer(orig: &str, value: &str, scale: u64) -> Result<u64, UnitParseError> {
    if let Ok(n) = value.parse::<u64>() {
        return n
            .checked_mul(scale)
            .ok_or_else(|| UnitParseError::new(orig, "value out of range"));
    }
    let (int_part, frac_part) = value
        .split_once('.')
        .ok_or_else(|| UnitParseError::new(orig, "invalid numeric value"))?;
    let int: u64 = if int_part.is_empty() {
        0
    } else {
        int_part
            .parse()
            .map_err(|_| UnitParseError::new(orig, "invalid numeric value"))?
    };
    if frac_part.is_empty() || frac_part.len() > 12 {
        return Err(UnitParseError::new(orig, "invalid numeric value"));
    }
    let frac: u64 = frac_part
        .parse()
        .map_err(|_| UnitParseError::new(orig, "invalid numeric value"))?;
    let denom = 10u64.pow(frac_part.len() as u32);
    let numer = int
        .checked_mul(denom)
        .and_then(|v| v.checked_add(frac))
        .ok_or_else(|| UnitParseError::new(orig, "value out of range"))?;
    let total = numer
        .checked_mul(scale)
        .ok_or_else(|| UnitParseError::new(orig, "value out of range"))?;
    if total % denom != 0 {
        return Err(UnitParseError::new(
            orig,
            "value does not resolve to a whole number of base units",
        ));
    }
    Ok(total / denom)
}

/// The 2-bit timestamp unit selector carried in the compact timing word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// 1 microsecond per tick; range 0..=1023 us.
    #[default]
    Micros1,
    /// 100 microseconds per tick; range ~102 ms.
    Micros100,
    /// 10 milliseconds per tick; range ~10.2 s.
    Millis10,
    /// 1 second per tick; range ~17 min.
    Secs1,
}

impl Granularity {
    pub const fn code(self) -> u8 {
        match self {
            Granularity::Micros1 => 0,
            Granularity::Micros100 => 1,
            Granularity::Millis10 => 2,
            Granularity::Secs1 => 3,
        }
    }

    pub const fn from_code(code: u8) -> Granularity {
        match code & 0b11 {
            0 => Granularity::Micros1,
            1 => Granularity::Micros100,
            2 => Granularity::Millis10,
            _ => Granularity::Secs1,
        }
    }

    pub const fn unit_micros(self) -> u64 {
        match self {
            Granularity::Micros1 => 1,
            Granularity::Micros100 => 100,
            Granularity::Millis10 => 10_000,
            Granularity::Secs1 => 1_000_000,
        }
    }

    /// Reduce a local-clock timestamp to ticks of this unit, modulo the
    /// 10-bit wire range.
    pub fn reduce(self, t: SimTime) -> u16 {
        ((t.0 / self.unit_micros()) % 1024) as u16
    }

    /// Reduce a duration to whole ticks (floor). Values beyond the 10-bit
    /// range are the caller's problem; see `TimingTuple` packing.
    pub fn reduce_duration(self, d: SimDuration) -> u64 {
        d.0 / self.unit_micros()
    }

    /// Tick difference `a - b` on the wrapping 10-bit timestamp circle.
    pub fn wrapping_delta(a: u16, b: u16) -> u16 {
        (a.wrapping_sub(b)) & 0x3ff
    }
}
