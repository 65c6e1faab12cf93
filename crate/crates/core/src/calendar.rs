//! Local-time scheduling helpers. The log is UTC; decision points and
//! "days" are in experiment-local time via a fixed UTC offset.

use chrono::{Datelike, Duration, FixedOffset, NaiveDate, TimeZone, Weekday};
use serde::{Deserialize, Serialize};

use crate::events::Timestamp;

pub const SECONDS_PER_DAY: i64 = 86_400;

/// Weekly decision slot: weekday and hour in local time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeeklySlot {
    pub weekday: Weekday,
    pub hour: u32,
    pub utc_offset_hours: i32,
}

impl Default for WeeklySlot {
    fn default() -> Self {
        Self { weekday: Weekday::Mon, hour: 6, utc_offset_hours: 7 }
    }
}

impl WeeklySlot {
    pub fn offset(&self) -> FixedOffset {
        FixedOffset::east_opt(self.utc_offset_hours * 3600).expect("offset within +-24h")
    }

    /// First slot on or after local midnight of `date`.
    pub fn first_on_or_after(&self, date: NaiveDate) -> Timestamp {
        let mut day = date;
        while day.weekday() != self.weekday {
            day = day.succ_opt().expect("date in range");
        }
        let local = day.and_hms_opt(self.hour, 0, 0).expect("hour < 24");
        self.offset()
            .from_local_datetime(&local)
            .single()
            .expect("fixed offsets are unambiguous")
            .to_utc()
    }
}

pub fn days(n: i64) -> Duration {
    Duration::days(n)
}

/// Local calendar date of a UTC instant.
pub fn local_date(ts: &Timestamp, utc_offset_hours: i32) -> NaiveDate {
    (*ts + Duration::hours(i64::from(utc_offset_hours))).date_naive()
}

/// Elapsed time in fractional days.
pub fn days_between(earlier: &Timestamp, later: &Timestamp) -> f64 {
    (*later - *earlier).num_seconds() as f64 / SECONDS_PER_DAY as f64
}
