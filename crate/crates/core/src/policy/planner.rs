use chrono::{Datelike, NaiveDate, NaiveDateTime, NaiveTime, TimeDelta};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::event::{PromptEvent, SurveyKind, Trigger};
use super::{Condition, PolicyConfig};
use crate::time::UtcOffset;
use crate::ParticipantId;

/// Local hours `[start_hour, end_hour)` during which intraday prompts may go out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryWindow {
    pub start_hour: u32,
    pub end_hour: u32,
}

impl Default for DeliveryWindow {
    fn default() -> Self {
        DeliveryWindow { start_hour: 8, end_hour: 20 }
    }
}

impl DeliveryWindow {
    pub fn minutes(&self) -> i64 {
        (self.end_hour.saturating_sub(self.start_hour) * 60) as i64
    }

    pub fn contains(&self, local: NaiveDateTime) -> bool {
        let start = NaiveTime::from_hms_opt(self.start_hour, 0, 0).unwrap_or(NaiveTime::MIN);
        let t = local.time();
        t >= start
            && (self.end_hour >= 24 || t < NaiveTime::from_hms_opt(self.end_hour, 0, 0).unwrap_or(NaiveTime::MIN))
    }

    fn opens(&self, date: NaiveDate) -> NaiveDateTime {
        date.and_hms_opt(self.start_hour, 0, 0).unwrap_or_default()
    }
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-participant, per-day seed for random-slot planning.
pub fn day_seed(study_seed: u64, participant_id: ParticipantId, date: NaiveDate) -> u64 {
    let a = splitmix64(study_seed);
    let b = splitmix64(a ^ participant_id.get() as u64);
    splitmix64(b ^ date.num_days_from_ce() as u64)
}

/// On-the-hour slots from the window start up to the last full hour before
/// the window closes (08:00 .. 19:00 by default).
pub fn plan_hourly_day(date: NaiveDate, window: &DeliveryWindow) -> Vec<NaiveDateTime> {
    (window.start_hour..window.end_hour).filter_map(|h| date.and_hms_opt(h, 0, 0)).collect()
}

/// `cfg.random_per_day` whole-minute slots drawn uniformly inside the
/// delivery window, rejecting draws that put two slots closer than the
/// minimum spacing.
pub fn plan_random_day(date: NaiveDate, seed: u64, cfg: &PolicyConfig) -> Vec<NaiveDateTime> {
    let span = cfg.window.minutes();
    let count = cfg.random_per_day;
    let spacing = cfg.min_spacing_minutes;
    let opens = cfg.window.opens(date);
    if count == 0 || span <= 0 {
        return Vec::new();
    }
    let to_time = |m: &i64| opens + TimeDelta::minutes(*m);

    let feasible = (count as i64 - 1) * spacing < span;
    if feasible {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..100_000 {
            let mut mins: Vec<i64> = (0..count).map(|_| rng.random_range(0..span)).collect();
            mins.sort_unstable();
            if mins.windows(2).all(|w| w[1] - w[0] >= spacing) {
                return mins.iter().map(to_time).collect();
            }
        }
    }
    // unreachable for sane configs; fall back to an even spread
    let step = span / count as i64;
    (0..count as i64).map(|i| i * step).map(|m| to_time(&m)).collect()
}

/// End-of-day survey at the daily survey hour, plus the end-of-week survey
/// when `week_boundary` is set.
pub fn plan_daily_weekly(
    date: NaiveDate,
    week_boundary: bool,
    participant_id: ParticipantId,
    offset: UtcOffset,
    condition: Condition,
    cfg: &PolicyConfig,
) -> Vec<PromptEvent> {
    let at = offset.at(date, cfg.daily_survey_hour, 0);
    let mut out = vec![PromptEvent::new(participant_id, SurveyKind::EndOfDay, condition, at, Trigger::Daily)];
    if week_boundary {
        out.push(PromptEvent::new(participant_id, SurveyKind::EndOfWeek, condition, at, Trigger::Weekly));
    }
    out
}
