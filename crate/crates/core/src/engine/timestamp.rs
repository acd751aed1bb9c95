use std::cmp::Ordering;
use std::fmt;
use std::sync::OnceLock;

use chrono::{DateTime, NaiveDate, NaiveDateTime, Timelike};
use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A schedule time such as `2025-02-06 11:48:48 pm`.
///
/// Keeps the exact text it was parsed from so it re-serializes unchanged.
/// Ordering and equality use the instant only.
#[derive(Debug, Clone)]
pub struct Timestamp {
    secs: i64,
    text: String,
}

fn grammar() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^(\d{4})-(\d{2})-(\d{2}) (\d{1,2}):(\d{2})(?::(\d{2}))? ?([AaPp][Mm])$")
            .expect("valid regex")
    })
}

impl Timestamp {
    pub fn parse(text: &str) -> Result<Self, String> {
        let caps = grammar()
            .captures(text)
            .ok_or_else(|| format!("`{text}` is not a `YYYY-MM-DD hh:mm:ss am|pm` timestamp"))?;
        let num = |i: usize| {
            caps.get(i)
                .map_or(0, |m| m.as_str().parse::<u32>().unwrap_or(u32::MAX))
        };
        let (year, month, day) = (num(1) as i32, num(2), num(3));
        let (hour12, minute, second) = (num(4), num(5), num(6));
        if !(1..=12).contains(&hour12) {
            return Err(format!("hour {hour12} out of range in `{text}`"));
        }
        let pm = caps[7].eq_ignore_ascii_case("pm");
        let hour = hour12 % 12 + if pm { 12 } else { 0 };
        let dt = NaiveDate::from_ymd_opt(year, month, day)
            .and_then(|d| d.and_hms_opt(hour, minute, second))
            .ok_or_else(|| format!("`{text}` is not a valid calendar time"))?;
        Ok(Self {
            secs: dt.and_utc().timestamp(),
            text: text.to_string(),
        })
    }

    /// Canonical rendering of an instant: `2025-02-06 11:48:48 pm`.
    pub fn from_secs(secs: i64) -> Self {
        let text = Self::naive(secs).format("%Y-%m-%d %I:%M:%S %P").to_string();
        Self { secs, text }
    }

    fn naive(secs: i64) -> NaiveDateTime {
        DateTime::from_timestamp(secs, 0)
            .expect("timestamp in range")
            .naive_utc()
    }

    pub fn secs(&self) -> i64 {
        self.secs
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    /// Clock time only, as used in prompt durations: `11:50 am`.
    pub fn clock_label(&self) -> String {
        Self::naive(self.secs).format("%-I:%M %P").to_string()
    }

    pub fn hour(&self) -> u32 {
        Self::naive(self.secs).hour()
    }
}

impl PartialEq for Timestamp {
    fn eq(&self, other: &Self) -> bool {
        self.secs == other.secs
    }
}

impl Eq for Timestamp {}

impl PartialOrd for Timestamp {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Timestamp {
    fn cmp(&self, other: &Self) -> Ordering {
        self.secs.cmp(&other.secs)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.text)
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Timestamp::parse(&text).map_err(serde::de::Error::custom)
    }
}
