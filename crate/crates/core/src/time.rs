//! Microsecond UTC timestamps, day arithmetic and the duration syntax used in
//! config files.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Duration as ChronoDuration, NaiveDate, SecondsFormat, TimeZone, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub const MICROS_PER_SECOND: i64 = 1_000_000;
pub const MICROS_PER_HOUR: i64 = 3_600 * MICROS_PER_SECOND;
pub const MICROS_PER_DAY: i64 = 24 * MICROS_PER_HOUR;

/// Integer microseconds since the Unix epoch, UTC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Timestamp(pub i64);

#[derive(Debug, thiserror::Error)]
#[error("invalid timestamp {input:?}: {reason}")]
pub struct TimestampParseError {
    pub input: String,
    pub reason: String,
}

impl Timestamp {
    pub const MIN: Timestamp = Timestamp(i64::MIN);
    pub const MAX: Timestamp = Timestamp(i64::MAX);

    pub fn from_micros(us: i64) -> Self {
        Timestamp(us)
    }

    pub fn micros(self) -> i64 {
        self.0
    }

    /// Midnight UTC at the start of `day`.
    pub fn start_of_day(day: NaiveDate) -> Self {
        let dt = day.and_hms_opt(0, 0, 0).expect("midnight exists").and_utc();
        Timestamp(dt.timestamp_micros())
    }

    pub fn from_ymd_hms(y: i32, m: u32, d: u32, hh: u32, mm: u32, ss: u32) -> Self {
        let dt = Utc
            .with_ymd_and_hms(y, m, d, hh, mm, ss)
            .single()
            .expect("valid calendar time");
        Timestamp(dt.timestamp_micros())
    }

    /// UTC calendar day containing this instant.
    pub fn day(self) -> NaiveDate {
        let days = self.0.div_euclid(MICROS_PER_DAY);
        NaiveDate::from_ymd_opt(1970, 1, 1)
            .unwrap()
            .checked_add_signed(ChronoDuration::days(days))
            .unwrap_or(if days < 0 { NaiveDate::MIN } else { NaiveDate::MAX })
    }

    /// Clamped to the range chrono can represent.
    pub fn to_datetime(self) -> DateTime<Utc> {
        DateTime::from_timestamp_micros(self.0).unwrap_or(if self.0 < 0 {
            DateTime::<Utc>::MIN_UTC
        } else {
            DateTime::<Utc>::MAX_UTC
        })
    }

    pub fn saturating_add(self, us: i64) -> Self {
        Timestamp(self.0.saturating_add(us))
    }

    pub fn saturating_sub(self, us: i64) -> Self {
        Timestamp(self.0.saturating_sub(us))
    }

    /// Start of the `width`-wide grid cell containing this instant, anchored
    /// at the Unix epoch.
    pub fn floor_to(self, width: i64) -> Self {
        debug_assert!(width > 0);
        Timestamp(self.0.div_euclid(width) * width)
    }

    /// Canonical rendering: `YYYY-MM-DDTHH:MM:SS.ffffffZ`.
    pub fn to_iso(self) -> String {
        self.to_datetime().to_rfc3339_opts(SecondsFormat::Micros, true)
    }

    pub fn parse_iso(s: &str) -> Result<Self, TimestampParseError> {
        let err = |reason: String| TimestampParseError {
            input: s.to_string(),
            reason,
        };
        if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
            return Ok(Timestamp(dt.with_timezone(&Utc).timestamp_micros()));
        }
        // Accept bare dates and naive date-times as UTC.
        if let Ok(day) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
            return Ok(Timestamp::start_of_day(day));
        }
        for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
            if let Ok(ndt) = chrono::NaiveDateTime::parse_from_str(s, fmt) {
                return Ok(Timestamp(ndt.and_utc().timestamp_micros()));
            }
        }
        Err(err("expected ISO-8601 UTC timestamp".into()))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_iso())
    }
}

impl FromStr for Timestamp {
    type Err = TimestampParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Timestamp::parse_iso(s)
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_iso())
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Timestamp::parse_iso(&s).map_err(serde::de::Error::custom)
    }
}

/// `[start, end)` in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeRange {
    pub start: Timestamp,
    pub end: Timestamp,
}

impl TimeRange {
    pub fn new(start: Timestamp, end: Timestamp) -> Option<Self> {
        (start < end).then_some(TimeRange { start, end })
    }

    pub fn all() -> Self {
        TimeRange {
            start: Timestamp::MIN,
            end: Timestamp::MAX,
        }
    }

    /// Whole UTC days `[first, last]`.
    pub fn days(first: NaiveDate, last_inclusive: NaiveDate) -> Self {
        TimeRange {
            start: Timestamp::start_of_day(first),
            end: Timestamp::start_of_day(last_inclusive.succ_opt().expect("date in range")),
        }
    }

    pub fn contains(&self, ts: Timestamp) -> bool {
        self.start <= ts && ts < self.end
    }

    /// Overlap with the closed interval `[lo, hi]`.
    pub fn overlaps_closed(&self, lo: Timestamp, hi: Timestamp) -> bool {
        lo < self.end && hi >= self.start
    }
}

/// Span of time in microseconds. Parses humantime syntax (`1h`, `30m`,
/// `7days`) and serializes back to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span(pub i64);

impl Span {
    pub const fn from_secs(s: i64) -> Self {
        Span(s * MICROS_PER_SECOND)
    }

    pub const fn from_hours(h: i64) -> Self {
        Span(h * MICROS_PER_HOUR)
    }

    pub const fn from_days(d: i64) -> Self {
        Span(d * MICROS_PER_DAY)
    }

    pub const fn micros(self) -> i64 {
        self.0
    }

    pub fn as_std(self) -> std::time::Duration {
        std::time::Duration::from_micros(self.0.max(0) as u64)
    }
}

impl FromStr for Span {
    type Err = humantime::DurationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let d = humantime::parse_duration(s.trim())?;
        Ok(Span(d.as_micros() as i64))
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", humantime::format_duration(self.as_std()))
    }
}

impl Serialize for Span {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Span {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iso_round_trip_keeps_micros() {
        let ts = Timestamp(1_714_521_600_123_456);
        assert_eq!(ts.to_iso(), "2024-05-01T00:00:00.123456Z");
        assert_eq!(Timestamp::parse_iso(&ts.to_iso()).unwrap(), ts);
    }

    #[test]
    fn parse_accepts_offsets_and_dates() {
        let a = Timestamp::parse_iso("2024-05-01T02:00:00+02:00").unwrap();
        let b = Timestamp::parse_iso("2024-05-01").unwrap();
        assert_eq!(a, b);
        assert!(Timestamp::parse_iso("yesterday").is_err());
    }

    #[test]
    fn day_of_negative_timestamps() {
        let ts = Timestamp(-1);
        assert_eq!(ts.day(), NaiveDate::from_ymd_opt(1969, 12, 31).unwrap());
        assert_eq!(Timestamp(-1).floor_to(MICROS_PER_DAY), Timestamp(-MICROS_PER_DAY));
    }

    #[test]
    fn span_parsing() {
        assert_eq!("1h".parse::<Span>().unwrap(), Span::from_hours(1));
        assert_eq!("24h".parse::<Span>().unwrap(), Span::from_days(1));
        assert_eq!("90s".parse::<Span>().unwrap(), Span::from_secs(90));
        assert!("soon".parse::<Span>().is_err());
    }
}
