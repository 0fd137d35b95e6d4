//! Survey instruments and response validation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::policy::{EventId, SurveyKind};
use crate::time::Timestamp;

/// One answered item: a Likert rating, a yes/no answer or free text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ItemValue {
    YesNo(bool),
    Rating(i64),
    Text(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyResponse {
    pub event_id: EventId,
    /// Server time is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub submitted_at: Option<Timestamp>,
    pub items: BTreeMap<String, ItemValue>,
}

impl SurveyResponse {
    pub fn new(event_id: EventId) -> Self {
        SurveyResponse { event_id, submitted_at: None, items: BTreeMap::new() }
    }

    pub fn with(mut self, key: &str, value: ItemValue) -> Self {
        self.items.insert(key.to_string(), value);
        self
    }

    pub fn rating(&self, key: &str) -> Option<i64> {
        match self.items.get(key) {
            Some(ItemValue::Rating(r)) => Some(*r),
            _ => None,
        }
    }

    /// The intraday activity rating (1 = very calm .. 5 = very active).
    pub fn activity(&self) -> Option<u8> {
        self.rating(ACTIVITY).and_then(|r| u8::try_from(r).ok())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ItemType {
    Rating { min: i64, max: i64 },
    YesNo,
    Text,
}

/// When an item must be answered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Presence {
    Required,
    Optional,
    /// Required from week 2 on; not asked in week 1.
    FromWeekTwo,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ItemSpec {
    pub key: &'static str,
    pub prompt: &'static str,
    pub item_type: ItemType,
    pub presence: Presence,
}

pub const ACTIVITY: &str = "activity";

const LIKERT: ItemType = ItemType::Rating { min: 1, max: 5 };

const fn item(key: &'static str, prompt: &'static str, item_type: ItemType, presence: Presence) -> ItemSpec {
    ItemSpec { key, prompt, item_type, presence }
}

pub const INTRADAY: &[ItemSpec] = &[
    item(
        ACTIVITY,
        "Child activity level (1 Very Calm: mostly sitting quietly .. 5 Very Active: constant movement)",
        LIKERT,
        Presence::Required,
    ),
    item("description", "What has your child been doing recently?", ItemType::Text, Presence::Optional),
];

pub const END_OF_DAY: &[ItemSpec] = &[
    item("medication", "Did your child take their medication today?", ItemType::YesNo, Presence::Required),
    item(
        "communication",
        "How effectively did you communicate with your child today? (1 Not effective at all .. 5 Extremely effective)",
        LIKERT,
        Presence::Required,
    ),
    item("reflection", "Reflection on the day", ItemType::Text, Presence::Optional),
];

pub const END_OF_WEEK: &[ItemSpec] = &[
    item("behavior_description", "Describe your child's behavior this week", ItemType::Text, Presence::Optional),
    item(
        "efficacy_confident",
        "My interactions with my child this week make me feel effective and confident as a parent",
        LIKERT,
        Presence::Required,
    ),
    item(
        "overwhelmed",
        "I felt overwhelmed by the responsibility of being a parent this week",
        LIKERT,
        Presence::Required,
    ),
    item("efficacy_handled", "I handled my child's behavior well this week", LIKERT, Presence::Required),
    item("closeness", "I felt close to my child this week", LIKERT, Presence::Required),
    item(
        "positive_reinforcement",
        "I often praised my child's positive behavior this week",
        LIKERT,
        Presence::Required,
    ),
    item("enjoyed_time", "I enjoyed spending time with my child this week", LIKERT, Presence::Required),
    item(
        "notification_awareness",
        "The notifications made me more aware of my child's behavior",
        LIKERT,
        Presence::FromWeekTwo,
    ),
    item("connection_quality", "The notifications helped me connect with my child", LIKERT, Presence::FromWeekTwo),
    item("manageability", "The number of notifications was manageable", LIKERT, Presence::FromWeekTwo),
    item("learning", "What did you learn this week?", ItemType::Text, Presence::Optional),
    item(
        "behavior_changes",
        "Did anything change in how you respond to your child?",
        ItemType::Text,
        Presence::Optional,
    ),
];

pub fn instrument(kind: SurveyKind) -> &'static [ItemSpec] {
    match kind {
        SurveyKind::Intraday => INTRADAY,
        SurveyKind::EndOfDay => END_OF_DAY,
        SurveyKind::EndOfWeek => END_OF_WEEK,
    }
}

/// Checks item keys, types, ranges and required answers for a survey sent
/// during study week `week`.
pub fn validate(kind: SurveyKind, week: Option<u32>, items: &BTreeMap<String, ItemValue>) -> Result<(), String> {
    let spec = instrument(kind);
    let week_one = week.is_none_or(|w| w <= 1);
    for (key, value) in items {
        let Some(s) = spec.iter().find(|s| s.key == key) else {
            return Err(format!("unknown item {key:?} for {} survey", kind.as_str()));
        };
        if s.presence == Presence::FromWeekTwo && week_one {
            return Err(format!("item {key:?} is not asked in week 1"));
        }
        match (s.item_type, value) {
            (ItemType::Rating { min, max }, ItemValue::Rating(r)) if (min..=max).contains(r) => {}
            (ItemType::Rating { min, max }, ItemValue::Rating(r)) => {
                return Err(format!("item {key:?} rating {r} outside {min}..={max}"));
            }
            (ItemType::YesNo, ItemValue::YesNo(_)) | (ItemType::Text, ItemValue::Text(_)) => {}
            (expected, _) => return Err(format!("item {key:?} expects {expected:?}")),
        }
    }
    for s in spec {
        let required = match s.presence {
            Presence::Required => true,
            Presence::FromWeekTwo => !week_one,
            Presence::Optional => false,
        };
        if required && !items.contains_key(s.key) {
            return Err(format!("missing required item {:?}", s.key));
        }
    }
    Ok(())
}
