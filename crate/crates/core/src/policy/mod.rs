//! When to prompt: study schedules, per-condition day planning, rate
//! limiting, prompt lifecycle and the per-participant scheduler.
//!
//! Every decision here is a pure function of its inputs so the live service
//! and the simulator behave identically.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sensing::DEFAULT_MIN_COVERAGE;
use crate::time::{Timestamp, MINUTE_MS};

mod engine;
mod event;
mod limiter;
mod planner;
mod schedule;

pub use engine::{calm_tick, ActionKind, CalmDecision, Decision, ParticipantScheduler, PlannedAction, SkipReason};
pub use event::{expire_sweep, EventId, PromptEvent, PromptState, SurveyKind, Transition, Trigger};
pub use limiter::RateLimiterState;
pub(crate) use planner::splitmix64;
pub use planner::{day_seed, plan_daily_weekly, plan_hourly_day, plan_random_day, DeliveryWindow};
pub use schedule::{
    make_schedule, BlockState, ConditionSwitch, ConditionTimeline, StudyCalendar, StudySchedule, WeekPlan,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    None,
    Hourly,
    Random,
    CalmOnly,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::None, Condition::Hourly, Condition::Random, Condition::CalmOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::None => "none",
            Condition::Hourly => "hourly",
            Condition::Random => "random",
            Condition::CalmOnly => "calm_only",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Condition::ALL
            .into_iter()
            .find(|c| c.as_str() == s || (s == "calm-only" && *c == Condition::CalmOnly))
            .ok_or_else(|| PolicyError::UnknownCondition(s.to_string()))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("unknown condition {0:?}")]
    UnknownCondition(String),
    #[error("event {event_id} expired at {expires_at}")]
    Expired { event_id: EventId, expires_at: Timestamp },
    #[error("event {event_id} is already {state}")]
    NotPending { event_id: EventId, state: PromptState },
    #[error("answer at {at} precedes send time {sent_at}")]
    BeforeSent { at: Timestamp, sent_at: Timestamp },
    #[error("transition targets event {0} but was applied to another event")]
    WrongEvent(EventId),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
}

/// Tunables for the prompting policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    /// Calm trigger fires when the predicted rating is strictly below this.
    pub threshold: f64,
    /// Intraday prompts per local day for calm-only (and random) delivery.
    pub daily_cap: u32,
    pub min_spacing_minutes: i64,
    pub window: DeliveryWindow,
    /// Local hour of the end-of-day (and end-of-week) survey.
    pub daily_survey_hour: u32,
    pub tick_minutes: i64,
    pub random_per_day: usize,
    pub min_coverage: u32,
    pub min_labels: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            threshold: 3.0,
            daily_cap: 5,
            min_spacing_minutes: 60,
            window: DeliveryWindow::default(),
            daily_survey_hour: 20,
            tick_minutes: 5,
            random_per_day: 5,
            min_coverage: DEFAULT_MIN_COVERAGE,
            min_labels: crate::calibration::DEFAULT_MIN_LABELS,
        }
    }
}

impl PolicyConfig {
    pub fn min_spacing_ms(&self) -> i64 {
        self.min_spacing_minutes * MINUTE_MS
    }

    pub fn tick_ms(&self) -> i64 {
        self.tick_minutes.max(1) * MINUTE_MS
    }
}
