use std::collections::BTreeMap;

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};

use super::event::{PromptEvent, SurveyKind, Trigger};
use super::limiter::RateLimiterState;
use super::planner::{day_seed, plan_hourly_day, plan_random_day};
use super::schedule::ConditionTimeline;
use super::{Condition, PolicyConfig};
use crate::calibration::{predict, CalibrationModel};
use crate::sensing::LookbackFeature;
use crate::time::{Timestamp, UtcOffset};
use crate::ParticipantId;

/// What the scheduler has to do at a given instant. The order of variants is
/// the processing order for actions that share a timestamp.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    FitModels,
    HourlySlot,
    RandomSlot,
    CalmTick,
    EndOfDay,
    EndOfWeek,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PlannedAction {
    pub at: Timestamp,
    pub kind: ActionKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum SkipReason {
    OutsideWindow,
    LowCoverage { windows_present: u32 },
    NoModel,
    NotCalm { predicted: f64 },
    Spacing { eligible_at: Timestamp },
    DailyCap { sent_today: u32 },
    ConditionMismatch { active: Option<Condition> },
}

#[derive(Clone, Debug, PartialEq)]
pub enum CalmDecision {
    Emit(PromptEvent),
    Skip(SkipReason),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Decision {
    Emit(PromptEvent),
    Skip { action: PlannedAction, reason: SkipReason },
    FitModels,
}

/// One calm-only evaluation: emit an intraday prompt iff the delivery window
/// is open, the lookback is usable, the predicted rating is strictly below
/// the threshold, the spacing rule is satisfied and the daily cap is not hit.
pub fn calm_tick(
    participant_id: ParticipantId,
    now: Timestamp,
    offset: UtcOffset,
    feature: &LookbackFeature,
    model: Option<&CalibrationModel>,
    limiter: &RateLimiterState,
    cfg: &PolicyConfig,
) -> CalmDecision {
    let local = now.local(offset);
    if !cfg.window.contains(local) {
        return CalmDecision::Skip(SkipReason::OutsideWindow);
    }
    let Some(model) = model else {
        return CalmDecision::Skip(SkipReason::NoModel);
    };
    let Some(predicted) = predict(model, feature, cfg.min_coverage) else {
        return CalmDecision::Skip(SkipReason::LowCoverage { windows_present: feature.windows_present });
    };
    if predicted >= cfg.threshold {
        return CalmDecision::Skip(SkipReason::NotCalm { predicted });
    }
    if !limiter.spacing_clear(now, cfg.min_spacing_ms()) {
        let eligible_at = limiter.eligible_at(cfg.min_spacing_ms()).unwrap_or(now);
        return CalmDecision::Skip(SkipReason::Spacing { eligible_at });
    }
    let sent_today = limiter.sent_on(local.date());
    if sent_today >= cfg.daily_cap {
        return CalmDecision::Skip(SkipReason::DailyCap { sent_today });
    }
    CalmDecision::Emit(PromptEvent::new(
        participant_id,
        SurveyKind::Intraday,
        Condition::CalmOnly,
        now,
        Trigger::CalmTrigger { predicted },
    ))
}

/// Plans and decides prompting for one participant.
#[derive(Clone, Debug)]
pub struct ParticipantScheduler {
    pub participant_id: ParticipantId,
    pub offset: UtcOffset,
    pub study_seed: u64,
    pub cfg: PolicyConfig,
    random_cache: BTreeMap<NaiveDate, Vec<Timestamp>>,
}

impl ParticipantScheduler {
    pub fn new(participant_id: ParticipantId, offset: UtcOffset, study_seed: u64, cfg: PolicyConfig) -> Self {
        ParticipantScheduler { participant_id, offset, study_seed, cfg, random_cache: BTreeMap::new() }
    }

    /// Random-condition slots for a local date, in UTC.
    pub fn random_slots(&mut self, date: NaiveDate) -> &[Timestamp] {
        let (seed, cfg, offset) = (day_seed(self.study_seed, self.participant_id, date), &self.cfg, self.offset);
        self.random_cache
            .entry(date)
            .or_insert_with(|| plan_random_day(date, seed, cfg).into_iter().map(|t| offset.to_utc(t)).collect())
    }

    /// Every action due in `(from, to]`, in processing order.
    pub fn actions_between(
        &mut self,
        timeline: &ConditionTimeline,
        from: Timestamp,
        to: Timestamp,
    ) -> Vec<PlannedAction> {
        let mut out = Vec::new();
        if to <= from {
            return out;
        }
        let in_range = |t: Timestamp| t > from && t <= to;
        let first = from.plus_millis(1).local_date(self.offset);
        let last = to.local_date(self.offset);
        let fit_date = timeline.fit_date();
        let tick = self.cfg.tick_ms();

        let mut date = first;
        while date <= last {
            if fit_date == Some(date) && in_range(self.offset.midnight(date)) {
                out.push(PlannedAction { at: self.offset.midnight(date), kind: ActionKind::FitModels });
            }
            if timeline.is_study_day(date) {
                let opens = self.offset.at(date, self.cfg.window.start_hour, 0);
                let closes = self.offset.at(date, self.cfg.window.end_hour, 0);
                let window_overlaps = opens <= to && closes > from.plus_millis(1);
                let matches = |t: Timestamp, c: Condition| in_range(t) && timeline.condition_at(t) == Some(c);

                if window_overlaps {
                    for slot in plan_hourly_day(date, &self.cfg.window) {
                        let t = self.offset.to_utc(slot);
                        if matches(t, Condition::Hourly) {
                            out.push(PlannedAction { at: t, kind: ActionKind::HourlySlot });
                        }
                    }
                    let slots = self.random_slots(date).to_vec();
                    for t in slots {
                        if matches(t, Condition::Random) {
                            out.push(PlannedAction { at: t, kind: ActionKind::RandomSlot });
                        }
                    }
                    // first grid point strictly after `from` and not before `opens`
                    let mut t = from.plus_millis(tick).floor_to(tick).max(opens.plus_millis(tick - 1).floor_to(tick));
                    while t <= to && t < closes {
                        if t >= opens && matches(t, Condition::CalmOnly) {
                            out.push(PlannedAction { at: t, kind: ActionKind::CalmTick });
                        }
                        t = t.plus_millis(tick);
                    }
                }
                let survey = self.offset.at(date, self.cfg.daily_survey_hour, 0);
                if in_range(survey) {
                    out.push(PlannedAction { at: survey, kind: ActionKind::EndOfDay });
                    if timeline.calendar.is_week_end(date) {
                        out.push(PlannedAction { at: survey, kind: ActionKind::EndOfWeek });
                    }
                }
            }
            date = match date.checked_add_days(Days::new(1)) {
                Some(d) => d,
                None => break,
            };
        }
        if let Some(keep_from) = last.pred_opt() {
            self.random_cache.retain(|d, _| *d >= keep_from);
        }
        out.sort();
        out
    }

    /// Decides one planned action. `lookback` is only consulted for calm ticks.
    pub fn decide<F>(
        &self,
        action: PlannedAction,
        timeline: &ConditionTimeline,
        limiter: &RateLimiterState,
        lookback: F,
        model: Option<&CalibrationModel>,
    ) -> Decision
    where
        F: FnOnce(Timestamp) -> LookbackFeature,
    {
        let at = action.at;
        let active = timeline.condition_at(at);
        let skip = |reason| Decision::Skip { action, reason };
        let expect = |c: Condition| active == Some(c);
        let pid = self.participant_id;
        let local = at.local(self.offset);
        match action.kind {
            ActionKind::FitModels => Decision::FitModels,
            ActionKind::EndOfDay | ActionKind::EndOfWeek => {
                let Some(condition) = active else {
                    return skip(SkipReason::ConditionMismatch { active });
                };
                let (kind, trigger) = if action.kind == ActionKind::EndOfDay {
                    (SurveyKind::EndOfDay, Trigger::Daily)
                } else {
                    (SurveyKind::EndOfWeek, Trigger::Weekly)
                };
                Decision::Emit(PromptEvent::new(pid, kind, condition, at, trigger))
            }
            ActionKind::HourlySlot | ActionKind::RandomSlot => {
                let (condition, trigger, capped) = if action.kind == ActionKind::HourlySlot {
                    (Condition::Hourly, Trigger::FixedSlot, false)
                } else {
                    (Condition::Random, Trigger::RandomSlot, true)
                };
                if !expect(condition) {
                    return skip(SkipReason::ConditionMismatch { active });
                }
                if !self.cfg.window.contains(local) {
                    return skip(SkipReason::OutsideWindow);
                }
                if !limiter.spacing_clear(at, self.cfg.min_spacing_ms()) {
                    let eligible_at = limiter.eligible_at(self.cfg.min_spacing_ms()).unwrap_or(at);
                    return skip(SkipReason::Spacing { eligible_at });
                }
                let sent_today = limiter.sent_on(local.date());
                if capped && sent_today >= self.cfg.daily_cap {
                    return skip(SkipReason::DailyCap { sent_today });
                }
                Decision::Emit(PromptEvent::new(pid, SurveyKind::Intraday, condition, at, trigger))
            }
            ActionKind::CalmTick => {
                if !expect(Condition::CalmOnly) {
                    return skip(SkipReason::ConditionMismatch { active });
                }
                let feature = lookback(at);
                match calm_tick(pid, at, self.offset, &feature, model, limiter, &self.cfg) {
                    CalmDecision::Emit(e) => Decision::Emit(e),
                    CalmDecision::Skip(reason) => skip(reason),
                }
            }
        }
    }
}
