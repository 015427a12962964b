//! Time source abstraction.
//!
//! Every timestamp that ends up in a persisted artifact flows through a
//! [`Clock`], so tests can pin time and make whole runs byte-reproducible.

use std::sync::Mutex;

use chrono::{DateTime, SecondsFormat, TimeZone, Utc};

/// Source of the current UTC instant.
pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

/// Wall-clock time.
#[derive(Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Test clock that returns a manually controlled instant.
#[derive(Debug)]
pub struct ManualClock {
    now: Mutex<DateTime<Utc>>,
}

impl ManualClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        Self {
            now: Mutex::new(start),
        }
    }

    /// Fixed clock at an arbitrary reference instant.
    pub fn fixed() -> Self {
        Self::new(Utc.with_ymd_and_hms(2026, 1, 15, 12, 0, 0).unwrap())
    }

    pub fn advance_millis(&self, ms: i64) {
        let mut now = self.now.lock().unwrap();
        *now += chrono::Duration::milliseconds(ms);
    }

    pub fn set(&self, instant: DateTime<Utc>) {
        *self.now.lock().unwrap() = instant;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.now.lock().unwrap()
    }
}

/// Render an instant as ISO 8601 UTC with millisecond precision,
/// e.g. `2026-01-15T12:00:00.000Z`.
pub fn format_ts(ts: DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Parse an ISO 8601 timestamp, normalizing any offset to UTC.
pub fn parse_ts(text: &str) -> Option<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(text)
        .ok()
        .map(|dt| dt.with_timezone(&Utc))
}

/// Filesystem-safe compact rendering used in quarantine file names.
pub fn format_ts_compact(ts: DateTime<Utc>) -> String {
    ts.format("%Y%m%dT%H%M%S%.3f").to_string().replace('.', "")
}
