use std::collections::{BTreeMap, HashSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::profile::FamilyProfile;
use super::substream;
use super::trace::Trace;
use crate::policy::{EventId, PromptEvent, StudyCalendar, SurveyKind};
use crate::server::survey::{instrument, ItemType, Presence, ACTIVITY};
use crate::server::{Hub, ItemValue, Participant, ServiceError, SurveyResponse};
use crate::time::{Timestamp, MINUTE_MS};
use crate::ParticipantId;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParentReport {
    pub participant_id: Option<ParticipantId>,
    pub seen: u64,
    pub decided_to_answer: u64,
    pub answered: u64,
    pub rejected_expired: u64,
    pub labels_created: u64,
    pub errors: Vec<String>,
}

#[derive(Clone, Debug)]
struct PlannedAnswer {
    event: PromptEvent,
    noise: f64,
    script: u64,
}

/// Simulated parent: polls for prompts every virtual minute and answers a
/// fraction of them after a random delay.
pub struct ParentClient {
    pub participant: Participant,
    profile: FamilyProfile,
    calendar: StudyCalendar,
    rng: ChaCha8Rng,
    noise: Normal<f64>,
    seen: HashSet<EventId>,
    planned: BTreeMap<Timestamp, Vec<PlannedAnswer>>,
    pub report: ParentReport,
}

impl ParentClient {
    pub fn new(participant: Participant, profile: FamilyProfile, seed: u64) -> Self {
        let rng = substream(seed, "responses", participant.id.get());
        let noise = Normal::new(0.0, profile.perception.noise_sd).expect("validated noise_sd");
        let calendar = StudyCalendar::new(participant.study_start);
        let report = ParentReport { participant_id: Some(participant.id), ..ParentReport::default() };
        ParentClient {
            participant,
            profile,
            calendar,
            rng,
            noise,
            seen: HashSet::new(),
            planned: BTreeMap::new(),
            report,
        }
    }

    fn week_of(&self, e: &PromptEvent) -> Option<u32> {
        self.calendar.week_of(e.sent_at.local_date(self.participant.utc_offset))
    }

    pub fn step(&mut self, now: Timestamp, hub: &dyn Hub, trace: &Trace) {
        match hub.pending(self.participant.id) {
            Ok(pending) => {
                for e in pending {
                    if self.seen.insert(e.id.clone()) {
                        self.plan(now, e);
                    }
                }
            }
            Err(e) => self.report.errors.push(e.to_string()),
        }
        while let Some(entry) = self.planned.first_entry().filter(|e| *e.key() <= now) {
            for plan in entry.remove() {
                self.answer(now, plan, hub, trace);
            }
        }
    }

    /// Every draw for an event happens here, in the order events are first
    /// seen, so answer timing never shifts later draws.
    fn plan(&mut self, now: Timestamp, event: PromptEvent) {
        self.report.seen += 1;
        let week = self.week_of(&event).unwrap_or(1);
        let p = self.profile.response_probability(event.kind == SurveyKind::Intraday, week);
        let u: f64 = self.rng.random();
        let delay = self.rng.random_range(0..self.profile.answer_delay_max_minutes) as i64;
        let noise = self.noise.sample(&mut self.rng);
        let script: u64 = self.rng.random();
        if u < p {
            self.report.decided_to_answer += 1;
            let at = now.plus_millis(delay * MINUTE_MS);
            self.planned.entry(at).or_default().push(PlannedAnswer { event, noise, script });
        }
    }

    fn answer(&mut self, now: Timestamp, plan: PlannedAnswer, hub: &dyn Hub, trace: &Trace) {
        let e = &plan.event;
        let mut r = SurveyResponse::new(e.id.clone());
        match e.kind {
            SurveyKind::Intraday => {
                let lookback = trace.true_lookback(now);
                let rating = self.profile.perception.rating(lookback.mean_energy, plan.noise);
                r = r.with(ACTIVITY, ItemValue::Rating(rating as i64));
                if plan.script % 3 == 0 {
                    r = r.with("description", ItemValue::Text("playing".into()));
                }
            }
            kind => {
                let week_one = self.week_of(e).is_none_or(|w| w <= 1);
                for (i, item) in instrument(kind).iter().enumerate() {
                    let asked = match item.presence {
                        Presence::Required => true,
                        Presence::FromWeekTwo => !week_one,
                        Presence::Optional => (plan.script >> i) & 1 == 1,
                    };
                    if !asked {
                        continue;
                    }
                    let value = match item.item_type {
                        ItemType::Rating { min, max } => {
                            ItemValue::Rating(min + ((plan.script >> (2 * i)) % (max - min + 1) as u64) as i64)
                        }
                        ItemType::YesNo => ItemValue::YesNo((plan.script >> i) % 10 != 0),
                        ItemType::Text => ItemValue::Text(format!("{} note", item.key)),
                    };
                    r = r.with(item.key, value);
                }
            }
        }
        match hub.respond(&r) {
            Ok(outcome) => {
                self.report.answered += 1;
                self.report.labels_created += outcome.label_recorded as u64;
            }
            Err(ServiceError::Expired { .. }) => self.report.rejected_expired += 1,
            Err(err) => self.report.errors.push(format!("{}: {err}", e.id)),
        }
    }
}
