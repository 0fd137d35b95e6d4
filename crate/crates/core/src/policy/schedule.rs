use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};

use super::planner::splitmix64;
use super::{Condition, PolicyError};
use crate::time::{Timestamp, UtcOffset};
use crate::ParticipantId;

pub const STUDY_WEEKS: u32 = 4;
const BLOCK_SIZE: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeekPlan {
    pub week: u8,
    pub condition: Condition,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudySchedule {
    pub participant_id: ParticipantId,
    pub week_plan: Vec<WeekPlan>,
    pub assignment_block: u32,
}

impl StudySchedule {
    pub fn conditions(&self) -> Vec<Condition> {
        self.week_plan.iter().map(|w| w.condition).collect()
    }

    /// Weeks 1-2 are (none, hourly); weeks 3-4 are (random, calm_only) in either order.
    pub fn validate(&self) -> Result<(), PolicyError> {
        use Condition::*;
        match self.conditions().as_slice() {
            [None, Hourly, Random, CalmOnly] | [None, Hourly, CalmOnly, Random] => {}
            other => return Err(PolicyError::InvalidSchedule(format!("unexpected week plan {other:?}"))),
        }
        if self.week_plan.iter().enumerate().any(|(i, w)| w.week as usize != i + 1) {
            return Err(PolicyError::InvalidSchedule("weeks must be numbered 1..4".into()));
        }
        Ok(())
    }

    /// The counterbalanced week-3/4 pair.
    pub fn late_order(&self) -> (Condition, Condition) {
        (self.week_plan[2].condition, self.week_plan[3].condition)
    }
}

/// Block randomization state: each consecutive pair of registrations
/// receives both week-3/4 orders, the first of the pair drawn from the seed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockState {
    pub seed: u64,
    pub assigned: u32,
}

impl BlockState {
    pub fn new(seed: u64) -> Self {
        BlockState { seed, assigned: 0 }
    }

    pub fn current_block(&self) -> u32 {
        self.assigned / BLOCK_SIZE
    }
}

pub fn make_schedule(participant_id: ParticipantId, block_state: &mut BlockState) -> StudySchedule {
    let block = block_state.current_block();
    let position = block_state.assigned % BLOCK_SIZE;
    block_state.assigned += 1;

    let random_first = splitmix64(block_state.seed ^ splitmix64(block as u64 + 1)) & 1 == 0;
    let random_first = random_first ^ (position == 1);
    let (w3, w4) =
        if random_first { (Condition::Random, Condition::CalmOnly) } else { (Condition::CalmOnly, Condition::Random) };
    let week_plan = [Condition::None, Condition::Hourly, w3, w4]
        .into_iter()
        .enumerate()
        .map(|(i, condition)| WeekPlan { week: i as u8 + 1, condition })
        .collect();
    StudySchedule { participant_id, week_plan, assignment_block: block }
}

/// Maps local dates to study days (1-based) and weeks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyCalendar {
    pub start_date: NaiveDate,
    pub weeks: u32,
}

impl StudyCalendar {
    pub fn new(start_date: NaiveDate) -> Self {
        StudyCalendar { start_date, weeks: STUDY_WEEKS }
    }

    pub fn total_days(&self) -> u32 {
        self.weeks * 7
    }

    pub fn study_day(&self, date: NaiveDate) -> Option<u32> {
        let d = (date - self.start_date).num_days();
        (0..self.total_days() as i64).contains(&d).then(|| d as u32 + 1)
    }

    pub fn week_of(&self, date: NaiveDate) -> Option<u32> {
        self.study_day(date).map(|d| (d - 1) / 7 + 1)
    }

    pub fn is_week_end(&self, date: NaiveDate) -> bool {
        self.study_day(date).is_some_and(|d| d % 7 == 0)
    }

    pub fn week_start(&self, week: u32) -> NaiveDate {
        self.start_date + Days::new(((week.max(1) - 1) * 7) as u64)
    }

    pub fn end_date(&self) -> NaiveDate {
        self.start_date + Days::new(self.total_days() as u64 - 1)
    }

    pub fn dates(&self) -> impl Iterator<Item = NaiveDate> + '_ {
        (0..self.total_days() as u64).map(|d| self.start_date + Days::new(d))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionSwitch {
    pub condition: Condition,
    pub effective_at: Timestamp,
}

/// The condition in force at any instant: the scheduled week's condition,
/// unless an experimenter switch took effect after that week began.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionTimeline {
    pub calendar: StudyCalendar,
    pub offset: UtcOffset,
    pub weeks: Vec<Condition>,
    pub switches: Vec<ConditionSwitch>,
}

impl ConditionTimeline {
    pub fn new(calendar: StudyCalendar, offset: UtcOffset, weeks: Vec<Condition>) -> Self {
        ConditionTimeline { calendar, offset, weeks, switches: Vec::new() }
    }

    pub fn from_schedule(calendar: StudyCalendar, offset: UtcOffset, schedule: &StudySchedule) -> Self {
        Self::new(calendar, offset, schedule.conditions())
    }

    /// Same condition every study week.
    pub fn constant(calendar: StudyCalendar, offset: UtcOffset, condition: Condition) -> Self {
        Self::new(calendar, offset, vec![condition; calendar.weeks as usize])
    }

    pub fn add_switch(&mut self, switch: ConditionSwitch) {
        let pos = self.switches.partition_point(|s| s.effective_at <= switch.effective_at);
        self.switches.insert(pos, switch);
    }

    pub fn is_study_day(&self, date: NaiveDate) -> bool {
        self.calendar.study_day(date).is_some()
    }

    /// `None` outside the study period.
    pub fn condition_at(&self, t: Timestamp) -> Option<Condition> {
        let week = self.calendar.week_of(t.local_date(self.offset))?;
        let scheduled = self.weeks.get(week as usize - 1).copied().unwrap_or(Condition::None);
        let week_began = self.offset.midnight(self.calendar.week_start(week));
        let latest = self.switches.iter().rev().find(|s| s.effective_at <= t);
        Some(match latest {
            Some(s) if s.effective_at >= week_began => s.condition,
            _ => scheduled,
        })
    }

    /// First local date after the first hourly week, when models get fitted.
    pub fn fit_date(&self) -> Option<NaiveDate> {
        let idx = self.weeks.iter().position(|c| *c == Condition::Hourly)?;
        let week = idx as u32 + 2;
        (week <= self.calendar.weeks).then(|| self.calendar.week_start(week))
    }
}
