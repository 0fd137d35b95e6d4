//! Response-rate and perceived-calm summaries per condition.

use serde::{Deserialize, Serialize};

use super::survey::SurveyResponse;
use crate::policy::{Condition, PromptEvent, PromptState, SurveyKind};
use crate::time::Timestamp;
use crate::ParticipantId;

/// Ratings strictly below this count as "perceived calm".
pub const CALM_RATING_BELOW: u8 = 3;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub sent: u64,
    pub answered: u64,
    pub expired: u64,
}

impl Counts {
    pub fn rate(&self) -> Option<f64> {
        (self.sent > 0).then(|| self.answered as f64 / self.sent as f64)
    }

    fn add(&mut self, state: PromptState) {
        self.sent += 1;
        match state {
            PromptState::Answered => self.answered += 1,
            PromptState::Expired => self.expired += 1,
            PromptState::Pending => {}
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionMetrics {
    pub condition: Condition,
    pub intraday: Counts,
    pub end_of_day: Counts,
    pub end_of_week: Counts,
    pub intraday_response_rate: Option<f64>,
    pub end_of_day_response_rate: Option<f64>,
    /// Answered intraday prompts rated below 3.
    pub calm_answers: u64,
    pub perceived_calm_ratio: Option<f64>,
}

impl ConditionMetrics {
    fn new(condition: Condition) -> Self {
        ConditionMetrics {
            condition,
            intraday: Counts::default(),
            end_of_day: Counts::default(),
            end_of_week: Counts::default(),
            intraday_response_rate: None,
            end_of_day_response_rate: None,
            calm_answers: 0,
            perceived_calm_ratio: None,
        }
    }

    fn finish(&mut self) {
        self.intraday_response_rate = self.intraday.rate();
        self.end_of_day_response_rate = self.end_of_day.rate();
        self.perceived_calm_ratio =
            (self.intraday.answered > 0).then(|| self.calm_answers as f64 / self.intraday.answered as f64);
    }

    pub fn counts(&self, kind: SurveyKind) -> &Counts {
        match kind {
            SurveyKind::Intraday => &self.intraday,
            SurveyKind::EndOfDay => &self.end_of_day,
            SurveyKind::EndOfWeek => &self.end_of_week,
        }
    }
}

/// Which prompts to summarize: an optional participant and a `[from, to)`
/// range on send time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsFilter {
    pub participant: Option<ParticipantId>,
    pub from: Option<Timestamp>,
    pub to: Option<Timestamp>,
}

impl MetricsFilter {
    pub fn matches(&self, e: &PromptEvent) -> bool {
        self.participant.is_none_or(|p| p == e.participant_id)
            && self.from.is_none_or(|f| e.sent_at >= f)
            && self.to.is_none_or(|t| e.sent_at < t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub filter: MetricsFilter,
    /// One entry per condition, in `Condition::ALL` order.
    pub conditions: Vec<ConditionMetrics>,
}

impl MetricsSummary {
    pub fn condition(&self, c: Condition) -> &ConditionMetrics {
        self.conditions.iter().find(|m| m.condition == c).expect("all conditions present")
    }
}

/// Summarizes prompts by the condition they were sent under.
pub fn summarize<'a, I>(filter: MetricsFilter, prompts: I) -> MetricsSummary
where
    I: IntoIterator<Item = (&'a PromptEvent, Option<&'a SurveyResponse>)>,
{
    let mut conditions: Vec<ConditionMetrics> = Condition::ALL.into_iter().map(ConditionMetrics::new).collect();
    for (e, response) in prompts {
        if !filter.matches(e) {
            continue;
        }
        let m =
            &mut conditions[Condition::ALL.iter().position(|c| *c == e.condition_at_send).expect("known condition")];
        match e.kind {
            SurveyKind::Intraday => {
                m.intraday.add(e.state);
                let calm = response.and_then(SurveyResponse::activity).is_some_and(|r| r < CALM_RATING_BELOW);
                if e.state == PromptState::Answered && calm {
                    m.calm_answers += 1;
                }
            }
            SurveyKind::EndOfDay => m.end_of_day.add(e.state),
            SurveyKind::EndOfWeek => m.end_of_week.add(e.state),
        }
    }
    conditions.iter_mut().for_each(ConditionMetrics::finish);
    MetricsSummary { filter, conditions }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{Transition, Trigger};
    use crate::server::survey::ItemValue;

    fn ev(c: Condition, kind: SurveyKind, t: i64) -> PromptEvent {
        PromptEvent::new(ParticipantId::new(1), kind, c, Timestamp::from_millis(t), Trigger::FixedSlot)
    }

    fn answer(e: &mut PromptEvent, rating: i64) -> SurveyResponse {
        e.apply(&Transition { event_id: e.id.clone(), to: PromptState::Answered, at: e.sent_at }).unwrap();
        SurveyResponse::new(e.id.clone()).with("activity", ItemValue::Rating(rating))
    }

    #[test]
    fn rates_and_calm_ratio() {
        let mut a = ev(Condition::CalmOnly, SurveyKind::Intraday, 0);
        let mut b = ev(Condition::CalmOnly, SurveyKind::Intraday, 1);
        let mut c = ev(Condition::CalmOnly, SurveyKind::Intraday, 2);
        let d = ev(Condition::CalmOnly, SurveyKind::Intraday, 3);
        let ra = answer(&mut a, 1);
        let rb = answer(&mut b, 3);
        let rc = answer(&mut c, 2);
        let eod = ev(Condition::Hourly, SurveyKind::EndOfDay, 4);
        let s = summarize(
            MetricsFilter::default(),
            [(&a, Some(&ra)), (&b, Some(&rb)), (&c, Some(&rc)), (&d, None), (&eod, None)],
        );
        let calm = s.condition(Condition::CalmOnly);
        assert_eq!(calm.intraday.sent, 4);
        assert_eq!(calm.intraday.answered, 3);
        assert_eq!(calm.intraday_response_rate, Some(0.75));
        assert_eq!(calm.perceived_calm_ratio, Some(2.0 / 3.0));
        assert_eq!(s.condition(Condition::Hourly).end_of_day.sent, 1);
        assert_eq!(s.condition(Condition::Hourly).end_of_day_response_rate, Some(0.0));
        assert_eq!(s.condition(Condition::Random).intraday_response_rate, None);
    }

    #[test]
    fn filter_range_is_half_open() {
        let f = MetricsFilter {
            participant: None,
            from: Some(Timestamp::from_millis(1)),
            to: Some(Timestamp::from_millis(3)),
        };
        let evs: Vec<_> = (0..4).map(|t| ev(Condition::Hourly, SurveyKind::Intraday, t)).collect();
        let s = summarize(f, evs.iter().map(|e| (e, None)));
        assert_eq!(s.condition(Condition::Hourly).intraday.sent, 2);
    }
}
