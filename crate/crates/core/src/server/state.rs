//! Per-participant state rebuilt from the event log.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::store::StoredEvent;
use super::survey::SurveyResponse;
use crate::calibration::PerceptionLabel;
use crate::policy::{
    ConditionTimeline, EventId, ParticipantScheduler, PolicyConfig, PromptEvent, RateLimiterState, StudyCalendar,
    StudySchedule, SurveyKind,
};
use crate::sensing::{lookback_mean, EnergyWindow, LookbackFeature, LOOKBACK_MS};
use crate::time::{Timestamp, UtcOffset};
use crate::ParticipantId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Participant {
    pub id: ParticipantId,
    pub display_alias: String,
    pub utc_offset: UtcOffset,
    pub enrolled_at: Timestamp,
    /// Local date of study day 1.
    pub study_start: NaiveDate,
    pub schedule: StudySchedule,
    pub active: bool,
}

/// A watch heartbeat. Omitted fields keep their previous value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceReport {
    pub participant_id: ParticipantId,
    #[serde(default)]
    pub battery_pct: Option<u8>,
    #[serde(default)]
    pub recording: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DeviceStatus {
    pub last_seen: Option<Timestamp>,
    pub battery_pct: Option<u8>,
    pub recording: bool,
    pub pin_set: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct PinHash {
    pub salt: String,
    pub hash: String,
}

#[derive(Debug)]
pub struct ParticipantState {
    pub participant: Participant,
    pub timeline: ConditionTimeline,
    pub scheduler: ParticipantScheduler,
    pub limiter: RateLimiterState,
    pub windows: BTreeMap<Timestamp, EnergyWindow>,
    /// Prompts in send order.
    pub events: Vec<PromptEvent>,
    index: HashMap<EventId, usize>,
    pending: BTreeSet<usize>,
    pub responses: HashMap<EventId, SurveyResponse>,
    pub labels: Vec<PerceptionLabel>,
    pub device: DeviceStatus,
    pub(crate) pin: Option<PinHash>,
}

impl ParticipantState {
    pub fn new(participant: Participant, study_seed: u64, cfg: &PolicyConfig) -> Self {
        let calendar = StudyCalendar::new(participant.study_start);
        let timeline = ConditionTimeline::from_schedule(calendar, participant.utc_offset, &participant.schedule);
        let scheduler = ParticipantScheduler::new(participant.id, participant.utc_offset, study_seed, cfg.clone());
        ParticipantState {
            limiter: RateLimiterState::new(participant.id),
            participant,
            timeline,
            scheduler,
            windows: BTreeMap::new(),
            events: Vec::new(),
            index: HashMap::new(),
            pending: BTreeSet::new(),
            responses: HashMap::new(),
            labels: Vec::new(),
            device: DeviceStatus { recording: true, ..DeviceStatus::default() },
            pin: None,
        }
    }

    pub fn id(&self) -> ParticipantId {
        self.participant.id
    }

    pub fn offset(&self) -> UtcOffset {
        self.participant.utc_offset
    }

    pub fn lookback(&self, as_of: Timestamp) -> LookbackFeature {
        lookback_mean(self.windows.range(as_of.minus_millis(LOOKBACK_MS)..as_of).map(|(_, w)| w), as_of)
    }

    pub fn event(&self, id: &EventId) -> Option<&PromptEvent> {
        self.index.get(id).map(|&i| &self.events[i])
    }

    pub fn pending(&self) -> impl Iterator<Item = &PromptEvent> {
        self.pending.iter().map(|&i| &self.events[i])
    }

    /// Study week of the local date a prompt was sent on.
    pub fn week_of(&self, at: Timestamp) -> Option<u32> {
        self.timeline.calendar.week_of(at.local_date(self.offset()))
    }

    fn touch(&mut self, at: Timestamp) {
        self.device.last_seen = Some(self.device.last_seen.map_or(at, |t| t.max(at)));
    }

    /// Applies a participant-scoped event. Events are validated before they
    /// are logged, so failures here mean a corrupt log.
    pub fn apply(&mut self, event: &StoredEvent) -> Result<(), String> {
        match event {
            StoredEvent::ParticipantActivity { active, .. } => self.participant.active = *active,
            StoredEvent::WindowIngested { window, at } => {
                self.windows.insert(window.window_start, window.clone());
                self.touch(*at);
            }
            StoredEvent::DeviceReported { report, at } => {
                if let Some(b) = report.battery_pct {
                    self.device.battery_pct = Some(b);
                }
                if let Some(r) = report.recording {
                    self.device.recording = r;
                }
                self.touch(*at);
            }
            StoredEvent::PinSet { salt, hash, .. } => {
                self.pin = Some(PinHash { salt: salt.clone(), hash: hash.clone() });
                self.device.pin_set = true;
            }
            StoredEvent::RecordingStopped { .. } => self.device.recording = false,
            StoredEvent::PromptSent { event } => {
                if self.index.contains_key(&event.id) {
                    return Err(format!("duplicate prompt {}", event.id));
                }
                if event.kind == SurveyKind::Intraday {
                    self.limiter.record(event.sent_at, event.sent_at.local_date(self.offset()));
                }
                let i = self.events.len();
                self.index.insert(event.id.clone(), i);
                if event.is_pending() {
                    self.pending.insert(i);
                }
                self.events.push(event.clone());
            }
            StoredEvent::PromptTransitioned { transition, response, .. } => {
                let &i = self
                    .index
                    .get(&transition.event_id)
                    .ok_or_else(|| format!("unknown prompt {}", transition.event_id))?;
                self.events[i].apply(transition).map_err(|e| e.to_string())?;
                self.pending.remove(&i);
                if let Some(r) = response {
                    self.responses.insert(transition.event_id.clone(), r.clone());
                }
            }
            StoredEvent::LabelRecorded { label } => self.labels.push(label.clone()),
            StoredEvent::ConditionSwitched { switch, .. } => self.timeline.add_switch(*switch),
            StoredEvent::Configured { .. }
            | StoredEvent::ParticipantRegistered { .. }
            | StoredEvent::ModelsFitted { .. }
            | StoredEvent::SchedulerAdvanced { .. } => {}
        }
        Ok(())
    }
}
