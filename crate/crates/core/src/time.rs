//! Timestamps, fixed UTC offsets and injectable clocks.
//!
//! Every component reads time through [`Clock`] so the same service code can
//! run against wall-clock time or a virtual clock driven by the simulator.

use std::fmt;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use chrono::{DateTime, NaiveDate, NaiveDateTime, NaiveTime, Utc};
use serde::{Deserialize, Serialize};

pub const SECOND_MS: i64 = 1_000;
pub const MINUTE_MS: i64 = 60 * SECOND_MS;
pub const HOUR_MS: i64 = 60 * MINUTE_MS;
pub const DAY_MS: i64 = 24 * HOUR_MS;

/// Milliseconds since the Unix epoch, UTC.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(i64);

impl Timestamp {
    pub const fn from_millis(ms: i64) -> Self {
        Timestamp(ms)
    }

    pub const fn as_millis(self) -> i64 {
        self.0
    }

    pub const fn plus_millis(self, ms: i64) -> Self {
        Timestamp(self.0 + ms)
    }

    pub const fn plus_minutes(self, minutes: i64) -> Self {
        self.plus_millis(minutes * MINUTE_MS)
    }

    pub const fn minus_millis(self, ms: i64) -> Self {
        Timestamp(self.0 - ms)
    }

    /// Signed distance `self - earlier` in milliseconds.
    pub const fn millis_since(self, earlier: Timestamp) -> i64 {
        self.0 - earlier.0
    }

    /// Largest multiple of `step_ms` that is `<= self`.
    pub fn floor_to(self, step_ms: i64) -> Self {
        Timestamp(self.0.div_euclid(step_ms) * step_ms)
    }

    pub fn is_aligned(self, step_ms: i64) -> bool {
        self.0.rem_euclid(step_ms) == 0
    }

    pub fn to_utc(self) -> DateTime<Utc> {
        DateTime::from_timestamp_millis(self.0).unwrap_or_default()
    }

    pub fn from_utc(dt: DateTime<Utc>) -> Self {
        Timestamp(dt.timestamp_millis())
    }

    pub fn local(self, offset: UtcOffset) -> NaiveDateTime {
        self.plus_millis(offset.as_millis()).to_utc().naive_utc()
    }

    pub fn local_date(self, offset: UtcOffset) -> NaiveDate {
        self.local(offset).date()
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_utc().format("%Y-%m-%dT%H:%M:%S%.3fZ"))
    }
}

/// A participant's fixed offset from UTC for the whole study (no DST).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UtcOffset(i32);

impl UtcOffset {
    pub const UTC: UtcOffset = UtcOffset(0);

    /// Offsets outside +/- 18 h are rejected.
    pub fn from_minutes(minutes: i32) -> Option<Self> {
        (-18 * 60..=18 * 60).contains(&minutes).then_some(UtcOffset(minutes))
    }

    pub const fn minutes(self) -> i32 {
        self.0
    }

    pub const fn as_millis(self) -> i64 {
        self.0 as i64 * MINUTE_MS
    }

    /// UTC instant of a local wall-clock time.
    pub fn to_utc(self, local: NaiveDateTime) -> Timestamp {
        Timestamp(local.and_utc().timestamp_millis()).minus_millis(self.as_millis())
    }

    pub fn at(self, date: NaiveDate, hour: u32, minute: u32) -> Timestamp {
        let time = NaiveTime::from_hms_opt(hour % 24, minute, 0).unwrap_or(NaiveTime::MIN);
        let base = self.to_utc(date.and_time(time));
        // hour 24 means midnight at the end of `date`
        if hour >= 24 {
            base.plus_millis(DAY_MS)
        } else {
            base
        }
    }

    pub fn midnight(self, date: NaiveDate) -> Timestamp {
        self.at(date, 0, 0)
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Timestamp::from_utc(Utc::now())
    }
}

/// Manually advanced clock shared between the simulator and the service.
#[derive(Debug, Clone)]
pub struct VirtualClock {
    now: Arc<AtomicI64>,
}

impl VirtualClock {
    pub fn new(start: Timestamp) -> Self {
        VirtualClock { now: Arc::new(AtomicI64::new(start.as_millis())) }
    }

    /// Moves the clock to `to`. Going backwards is ignored.
    pub fn set(&self, to: Timestamp) {
        self.now.fetch_max(to.as_millis(), Ordering::SeqCst);
    }

    pub fn advance_millis(&self, ms: i64) {
        self.now.fetch_add(ms.max(0), Ordering::SeqCst);
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Timestamp {
        Timestamp(self.now.load(Ordering::SeqCst))
    }
}
