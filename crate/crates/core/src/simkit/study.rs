use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};

use super::parent::{ParentClient, ParentReport};
use super::profile::FamilyProfile;
use super::trace::{gen_trace, ActivityState, Trace};
use super::watch::{ConnectivitySchedule, TransportReport, WatchClient};
use super::SimError;
use crate::calibration::{evaluate_personalization, predict, select_model, CalibrationModel, PersonalizationReport};
use crate::policy::{plan_hourly_day, Condition, PolicyConfig, PromptEvent, StudyCalendar, SurveyKind, Trigger};
use crate::sensing::{lookback_mean, WINDOW_MS};
use crate::server::{FlakyHub, MetricsFilter, MetricsSummary, Participant, Service, ServiceConfig};
use crate::time::{Clock, Timestamp, VirtualClock, MINUTE_MS};
use crate::ParticipantId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyOptions {
    pub seed: u64,
    /// Virtual time at which every family enrolls.
    pub start: Timestamp,
    pub policy: PolicyConfig,
    /// Train fraction for the personalization evaluation.
    pub split: f64,
    pub chunk_size: usize,
    /// Fraction of data-path calls that fail in transit.
    pub transport_fault_rate: f64,
    /// Persist the event log here instead of keeping it in memory.
    pub store_path: Option<PathBuf>,
    /// Drop the service after this many simulated minutes and reopen it
    /// from `store_path`.
    pub restart_at_minute: Option<u64>,
    /// Replace every family's week plan.
    pub weeks_override: Option<[Condition; 4]>,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions {
            seed: 42,
            // 2025-03-02T12:00:00Z
            start: Timestamp::from_millis(1_740_916_800_000),
            policy: PolicyConfig::default(),
            split: 0.8,
            chunk_size: 4096,
            transport_fault_rate: 0.05,
            store_path: None,
            restart_at_minute: None,
            weeks_override: None,
        }
    }
}

/// How well "predicted calm" matched the true state of the last completed
/// window, over every calm-only tick with a usable lookback.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectorStats {
    pub ticks: u64,
    pub true_positive: u64,
    pub false_positive: u64,
    pub false_negative: u64,
    pub true_negative: u64,
    /// Calm-triggered prompts that were sent, and how many of them went out
    /// while the child was truly calm.
    pub triggered: u64,
    pub triggered_truly_calm: u64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl DetectorStats {
    pub fn precision(&self) -> Option<f64> {
        ratio(self.true_positive, self.true_positive + self.false_positive)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.true_positive, self.true_positive + self.false_negative)
    }

    pub fn trigger_precision(&self) -> Option<f64> {
        ratio(self.triggered_truly_calm, self.triggered)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvariantViolation {
    pub participant_id: ParticipantId,
    pub rule: String,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRunReport {
    pub seed: u64,
    pub participants: Vec<Participant>,
    pub metrics: MetricsSummary,
    pub labels: u64,
    pub models: Vec<CalibrationModel>,
    /// `None` when there were too few labels to evaluate.
    pub personalization: Option<PersonalizationReport>,
    pub detector: DetectorStats,
    pub transport: Vec<TransportReport>,
    /// Windows held by the service per participant at the end.
    pub windows_stored: Vec<u64>,
    /// Every generated window is either stored or reported undelivered.
    pub conservation_ok: bool,
    pub parents: Vec<ParentReport>,
    pub skip_counts: BTreeMap<String, u64>,
    pub violations: Vec<InvariantViolation>,
    pub restarts: u32,
}

/// A finished run: the report plus the service and traces behind it.
pub struct StudyRun {
    pub report: StudyRunReport,
    pub service: Arc<Service>,
    pub traces: Vec<Trace>,
}

fn open_service(opts: &StudyOptions, clock: &VirtualClock) -> Result<Service, SimError> {
    let config = ServiceConfig { study_seed: opts.seed, policy: opts.policy.clone() };
    let clock: Arc<dyn Clock> = Arc::new(clock.clone());
    Ok(match &opts.store_path {
        Some(path) => Service::open(path, config, clock, false)?,
        None => Service::in_memory(config, clock),
    })
}

/// Runs a full study for `profiles` on a virtual clock, one simulated minute
/// at a time: watches release windows, the service ticks, parents poll.
pub fn run_study(profiles: &[FamilyProfile], opts: &StudyOptions) -> Result<StudyRun, SimError> {
    if profiles.is_empty() {
        return Err(SimError::Options("no families to simulate".into()));
    }
    if opts.restart_at_minute.is_some() && opts.store_path.is_none() {
        return Err(SimError::Options("a restart needs a store path".into()));
    }
    for p in profiles {
        p.validate()?;
    }
    let clock = VirtualClock::new(opts.start);
    let svc = Arc::new(open_service(opts, &clock)?);
    if !svc.participants().is_empty() {
        return Err(SimError::Options("the store already holds a study".into()));
    }

    let mut participants = Vec::new();
    for p in profiles {
        let participant = svc.register_participant(&format!("family-{:02}", p.participant_id), p.utc_offset_minutes)?;
        if let Some(weeks) = opts.weeks_override {
            let cal = StudyCalendar::new(participant.study_start);
            for (w, c) in weeks.into_iter().enumerate() {
                let at = participant.utc_offset.midnight(cal.week_start(w as u32 + 1));
                svc.switch_condition(participant.id, c, at)?;
            }
        }
        participants.push(participant);
    }

    let end = participants
        .iter()
        .map(|p| {
            let cal = StudyCalendar::new(p.study_start);
            p.utc_offset
                .at(cal.end_date(), opts.policy.daily_survey_hour, 0)
                .plus_millis(SurveyKind::EndOfWeek.lifetime_ms())
        })
        .max()
        .expect("at least one participant")
        .plus_minutes(1);

    let mut traces = Vec::new();
    let mut watches = Vec::new();
    let mut parents = Vec::new();
    for (p, participant) in profiles.iter().zip(&participants) {
        let first_day = participant.study_start - Days::new(1);
        let days = StudyCalendar::new(participant.study_start).total_days() + 4;
        let trace = gen_trace(p, participant.id, participant.utc_offset, first_day, days, opts.seed)?;
        let conn = ConnectivitySchedule::generate(
            &p.connectivity,
            participant.id,
            participant.utc_offset,
            participant.study_start,
            days,
            opts.seed,
        );
        let windows = trace
            .windows
            .iter()
            .filter(|w| w.window_start >= participant.enrolled_at && w.window_start.plus_millis(WINDOW_MS) <= end)
            .cloned()
            .collect();
        let mut watch = WatchClient::new(participant.id, participant.utc_offset, windows, conn);
        watch.chunk_size = opts.chunk_size;
        watches.push(watch);
        parents.push(ParentClient::new(participant.clone(), p.clone(), opts.seed));
        traces.push(trace);
    }

    let mut hub = FlakyHub::new(svc, opts.seed ^ 0x7261_6e73_706f_7274, opts.transport_fault_rate);
    let mut restarts = 0;
    let mut skip_counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut now = opts.start;
    let mut minute = 0u64;
    while now <= end {
        if opts.restart_at_minute == Some(minute) {
            let reopened = Arc::new(open_service(opts, &clock)?);
            let old = hub.replace_inner(reopened);
            for (k, v) in old.skip_counts() {
                *skip_counts.entry(k).or_default() += v;
            }
            drop(old);
            restarts += 1;
        }
        clock.set(now);
        for w in &mut watches {
            w.step(now, &hub);
        }
        hub.inner().tick()?;
        for (parent, trace) in parents.iter_mut().zip(&traces) {
            parent.step(now, &hub, trace);
        }
        now = now.plus_minutes(1);
        minute += 1;
    }
    let transport: Vec<TransportReport> = watches.iter_mut().map(|w| w.finish(end, &hub)).collect();
    let svc = Arc::clone(hub.inner());
    for (k, v) in svc.skip_counts() {
        *skip_counts.entry(k).or_default() += v;
    }

    let mut windows_stored = Vec::new();
    let mut conservation_ok = true;
    for (t, p) in transport.iter().zip(&participants) {
        let stored = svc.windows(p.id)?.len() as u64;
        conservation_ok &= t.generated == stored + t.undelivered;
        windows_stored.push(stored);
    }

    let labels = svc.labels();
    let personalization = evaluate_personalization(&labels, opts.split, opts.seed).ok();
    let snapshot = svc.models();
    let mut detector = DetectorStats::default();
    let mut violations = Vec::new();
    for (participant, trace) in participants.iter().zip(&traces) {
        let events = svc.events(participant.id)?;
        let model = select_model(participant.id, &snapshot, opts.policy.min_labels).ok();
        detector_stats(&svc, participant, trace, &events, model, &opts.policy, &mut detector)?;
        let condition_of = |date: NaiveDate| {
            let noon = participant.utc_offset.at(date, 12, 0);
            svc.condition_at(participant.id, noon).ok().flatten().unwrap_or(Condition::None)
        };
        check_invariants(participant, &events, &opts.policy, condition_of, &mut violations);
    }

    let report = StudyRunReport {
        seed: opts.seed,
        participants: svc.participants(),
        metrics: svc.metrics(MetricsFilter::default()),
        labels: labels.len() as u64,
        models: snapshot.models().cloned().collect(),
        personalization,
        detector,
        transport,
        windows_stored,
        conservation_ok,
        parents: parents.into_iter().map(|p| p.report).collect(),
        skip_counts,
        violations,
        restarts,
    };
    Ok(StudyRun { report, service: svc, traces })
}

fn detector_stats(
    svc: &Service,
    participant: &Participant,
    trace: &Trace,
    events: &[PromptEvent],
    model: Option<&CalibrationModel>,
    cfg: &PolicyConfig,
    stats: &mut DetectorStats,
) -> Result<(), SimError> {
    for e in events {
        if matches!(e.trigger, Trigger::CalmTrigger { .. }) {
            stats.triggered += 1;
            stats.triggered_truly_calm += (trace.last_completed_state(e.sent_at) == Some(ActivityState::Calm)) as u64;
        }
    }
    let Some(model) = model else {
        return Ok(());
    };
    let windows = svc.windows(participant.id)?;
    let offset = participant.utc_offset;
    let cal = StudyCalendar::new(participant.study_start);
    let tick = cfg.tick_ms();
    for date in cal.dates() {
        let mut t = offset.at(date, cfg.window.start_hour, 0);
        let closes = offset.at(date, cfg.window.end_hour, 0);
        while t < closes {
            if svc.condition_at(participant.id, t)? == Some(Condition::CalmOnly) {
                let from = t.minus_millis(crate::sensing::LOOKBACK_MS);
                let lo = windows.partition_point(|w| w.window_start < from);
                let hi = windows.partition_point(|w| w.window_start < t);
                let feature = lookback_mean(&windows[lo..hi], t);
                if let (Some(predicted), Some(truth)) =
                    (predict(model, &feature, cfg.min_coverage), trace.last_completed_state(t))
                {
                    stats.ticks += 1;
                    match (predicted < cfg.threshold, truth == ActivityState::Calm) {
                        (true, true) => stats.true_positive += 1,
                        (true, false) => stats.false_positive += 1,
                        (false, true) => stats.false_negative += 1,
                        (false, false) => stats.true_negative += 1,
                    }
                }
            }
            t = t.plus_millis(tick);
        }
    }
    Ok(())
}

/// Checks the sent prompts of one participant against the delivery rules.
/// `condition_of` gives the condition in force on each study date.
pub fn check_invariants<F>(
    participant: &Participant,
    events: &[PromptEvent],
    cfg: &PolicyConfig,
    condition_of: F,
    out: &mut Vec<InvariantViolation>,
) where
    F: Fn(NaiveDate) -> Condition,
{
    let pid = participant.id;
    let offset = participant.utc_offset;
    let cal = StudyCalendar::new(participant.study_start);
    let mut flag =
        |rule: &str, detail: String| out.push(InvariantViolation { participant_id: pid, rule: rule.into(), detail });

    let mut intraday: Vec<&PromptEvent> = events.iter().filter(|e| e.kind == SurveyKind::Intraday).collect();
    intraday.sort_by_key(|e| e.sent_at);
    for pair in intraday.windows(2) {
        let gap = pair[1].sent_at.millis_since(pair[0].sent_at);
        if gap < cfg.min_spacing_ms() {
            flag("spacing", format!("{} and {} are {} min apart", pair[0].id, pair[1].id, gap / MINUTE_MS));
        }
    }
    let mut per_day: BTreeMap<(NaiveDate, Condition), u32> = BTreeMap::new();
    for e in &intraday {
        let local = e.sent_at.local(offset);
        if !cfg.window.contains(local) {
            flag("delivery_window", format!("{} sent at local {local}", e.id));
        }
        if let Trigger::CalmTrigger { predicted } = e.trigger {
            if predicted >= cfg.threshold {
                flag("calm_threshold", format!("{} predicted {predicted:.3}", e.id));
            }
        }
        *per_day.entry((local.date(), e.condition_at_send)).or_default() += 1;
    }
    let hourly = plan_hourly_day(participant.study_start, &cfg.window).len() as u32;
    for date in cal.dates() {
        let condition = condition_of(date);
        let n = per_day.get(&(date, condition)).copied().unwrap_or(0);
        let ok = match condition {
            Condition::None => n == 0,
            Condition::Hourly => n == hourly,
            Condition::Random => n == cfg.random_per_day.min(cfg.daily_cap as usize) as u32,
            Condition::CalmOnly => n <= cfg.daily_cap,
        };
        if !ok {
            flag("daily_count", format!("{date} under {condition}: {n} intraday prompts"));
        }
    }
    for ((date, condition), n) in &per_day {
        if condition_of(*date) != *condition {
            flag("condition", format!("{date}: {n} prompts sent under {condition}"));
        }
    }

    let count_kind = |kind: SurveyKind| {
        let mut days: BTreeMap<NaiveDate, u32> = BTreeMap::new();
        for e in events.iter().filter(|e| e.kind == kind) {
            *days.entry(e.sent_at.local_date(offset)).or_default() += 1;
        }
        days
    };
    let eod = count_kind(SurveyKind::EndOfDay);
    let eow = count_kind(SurveyKind::EndOfWeek);
    let study_days: BTreeSet<NaiveDate> = cal.dates().collect();
    for date in &study_days {
        let n = eod.get(date).copied().unwrap_or(0);
        if n != 1 {
            flag("end_of_day", format!("{date}: {n} end-of-day surveys"));
        }
        let expected = cal.is_week_end(*date) as u32;
        let n = eow.get(date).copied().unwrap_or(0);
        if n != expected {
            flag("end_of_week", format!("{date}: {n} end-of-week surveys, expected {expected}"));
        }
    }
    for date in eod.keys().chain(eow.keys()) {
        if !study_days.contains(date) {
            flag("study_period", format!("survey sent on {date}, outside the study"));
        }
    }
}
