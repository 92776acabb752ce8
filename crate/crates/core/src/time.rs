//! Simulated time.
//!
//! All clocks in a run share one virtual timeline quantized to 0.01 ms
//! ticks. On the wire and in files a `SimTime` is written as real-valued
//! milliseconds, so `28.79` survives a round trip exactly.

use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A point on (or a span of) the simulated timeline, in 0.01 ms ticks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SimTime(i64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const TICKS_PER_MS: i64 = 100;

    pub const fn from_ticks(ticks: i64) -> Self {
        SimTime(ticks)
    }

    pub const fn from_millis(ms: i64) -> Self {
        SimTime(ms * Self::TICKS_PER_MS)
    }

    /// Rounds to the nearest tick. Non-finite input maps to zero; callers
    /// that accept external input validate finiteness first.
    pub fn from_ms(ms: f64) -> Self {
        if !ms.is_finite() {
            return SimTime::ZERO;
        }
        SimTime((ms * Self::TICKS_PER_MS as f64).round() as i64)
    }

    pub const fn ticks(self) -> i64 {
        self.0
    }

    pub fn as_ms(self) -> f64 {
        self.0 as f64 / Self::TICKS_PER_MS as f64
    }

    pub fn as_secs(self) -> f64 {
        self.0 as f64 / (Self::TICKS_PER_MS as f64 * 1000.0)
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }

    pub fn is_negative(self) -> bool {
        self.0 < 0
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 += rhs.0;
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ms", self.as_ms())
    }
}

impl Serialize for SimTime {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.as_ms())
    }
}

impl<'de> Deserialize<'de> for SimTime {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let ms = f64::deserialize(deserializer)?;
        if !ms.is_finite() || ms.abs() > (i64::MAX / Self::TICKS_PER_MS) as f64 {
            return Err(serde::de::Error::custom(format!("time {ms} ms out of range")));
        }
        Ok(SimTime::from_ms(ms))
    }
}
