use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::time::Timestamp;
use crate::ParticipantId;

/// Spacing and daily-count bookkeeping for one participant's intraday prompts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateLimiterState {
    pub participant_id: ParticipantId,
    pub last_intraday_sent: Option<Timestamp>,
    pub sent_today: u32,
    pub day_anchor: Option<NaiveDate>,
}

impl RateLimiterState {
    pub fn new(participant_id: ParticipantId) -> Self {
        RateLimiterState { participant_id, last_intraday_sent: None, sent_today: 0, day_anchor: None }
    }

    /// Intraday prompts already sent on local date `today`.
    pub fn sent_on(&self, today: NaiveDate) -> u32 {
        if self.day_anchor == Some(today) {
            self.sent_today
        } else {
            0
        }
    }

    /// Earliest instant the spacing rule allows the next prompt, if any restriction applies.
    pub fn eligible_at(&self, min_spacing_ms: i64) -> Option<Timestamp> {
        self.last_intraday_sent.map(|t| t.plus_millis(min_spacing_ms))
    }

    pub fn spacing_clear(&self, now: Timestamp, min_spacing_ms: i64) -> bool {
        self.eligible_at(min_spacing_ms).is_none_or(|e| now >= e)
    }

    pub fn record(&mut self, sent_at: Timestamp, today: NaiveDate) {
        if self.day_anchor != Some(today) {
            self.day_anchor = Some(today);
            self.sent_today = 0;
        }
        self.sent_today += 1;
        self.last_intraday_sent = Some(self.last_intraday_sent.map_or(sent_at, |t| t.max(sent_at)));
    }
}
