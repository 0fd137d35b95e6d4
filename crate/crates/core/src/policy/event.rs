use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Condition, PolicyError};
use crate::time::{Timestamp, HOUR_MS, MINUTE_MS};
use crate::ParticipantId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurveyKind {
    Intraday,
    EndOfDay,
    EndOfWeek,
}

impl SurveyKind {
    /// Time from send to expiry.
    pub const fn lifetime_ms(self) -> i64 {
        match self {
            SurveyKind::Intraday => 30 * MINUTE_MS,
            SurveyKind::EndOfDay => 12 * HOUR_MS,
            SurveyKind::EndOfWeek => 48 * HOUR_MS,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SurveyKind::Intraday => "intraday",
            SurveyKind::EndOfDay => "end_of_day",
            SurveyKind::EndOfWeek => "end_of_week",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Trigger {
    FixedSlot,
    RandomSlot,
    CalmTrigger { predicted: f64 },
    Daily,
    Weekly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptState {
    Pending,
    Answered,
    Expired,
}

impl fmt::Display for PromptState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptState::Pending => "pending",
            PromptState::Answered => "answered",
            PromptState::Expired => "expired",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EventId(String);

impl EventId {
    pub fn new(participant_id: ParticipantId, kind: SurveyKind, sent_at: Timestamp) -> Self {
        EventId(format!("{participant_id}-{}-{}", kind.as_str(), sent_at.as_millis()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<&str> for EventId {
    fn from(s: &str) -> Self {
        EventId(s.to_string())
    }
}

impl fmt::Display for EventId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptEvent {
    pub id: EventId,
    pub participant_id: ParticipantId,
    pub kind: SurveyKind,
    pub condition_at_send: Condition,
    pub scheduled_at: Timestamp,
    pub sent_at: Timestamp,
    pub expires_at: Timestamp,
    pub trigger: Trigger,
    pub state: PromptState,
}

/// A state change of one prompt, as recorded in the event log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub event_id: EventId,
    pub to: PromptState,
    pub at: Timestamp,
}

impl PromptEvent {
    /// A pending prompt sent at its scheduled time.
    pub fn new(
        participant_id: ParticipantId,
        kind: SurveyKind,
        condition_at_send: Condition,
        at: Timestamp,
        trigger: Trigger,
    ) -> Self {
        PromptEvent {
            id: EventId::new(participant_id, kind, at),
            participant_id,
            kind,
            condition_at_send,
            scheduled_at: at,
            sent_at: at,
            expires_at: at.plus_millis(kind.lifetime_ms()),
            trigger,
            state: PromptState::Pending,
        }
    }

    pub fn is_pending(&self) -> bool {
        self.state == PromptState::Pending
    }

    /// An answer at `at` is accepted only while pending and strictly before expiry.
    pub fn check_answer(&self, at: Timestamp) -> Result<Transition, PolicyError> {
        if self.state != PromptState::Pending {
            return Err(PolicyError::NotPending { event_id: self.id.clone(), state: self.state });
        }
        if at >= self.expires_at {
            return Err(PolicyError::Expired { event_id: self.id.clone(), expires_at: self.expires_at });
        }
        if at < self.sent_at {
            return Err(PolicyError::BeforeSent { at, sent_at: self.sent_at });
        }
        Ok(Transition { event_id: self.id.clone(), to: PromptState::Answered, at })
    }

    /// Applies a transition; only `pending -> answered|expired` is allowed.
    pub fn apply(&mut self, t: &Transition) -> Result<(), PolicyError> {
        if t.event_id != self.id {
            return Err(PolicyError::WrongEvent(t.event_id.clone()));
        }
        match (self.state, t.to) {
            (PromptState::Pending, PromptState::Answered | PromptState::Expired) => {
                self.state = t.to;
                Ok(())
            }
            (state, _) => Err(PolicyError::NotPending { event_id: self.id.clone(), state }),
        }
    }
}

/// Expiry transitions for every pending event with `expires_at <= now`.
pub fn expire_sweep<'a, I>(now: Timestamp, events: I) -> Vec<Transition>
where
    I: IntoIterator<Item = &'a PromptEvent>,
{
    events
        .into_iter()
        .filter(|e| e.is_pending() && e.expires_at <= now)
        .map(|e| Transition { event_id: e.id.clone(), to: PromptState::Expired, at: now })
        .collect()
}
