use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use chrono::Days;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{summarize, MetricsFilter, MetricsSummary};
use super::state::{DeviceReport, DeviceStatus, Participant, ParticipantState};
use super::store::{EventLog, StoredEvent};
use super::survey::{validate, SurveyResponse};
use super::upload::{UploadManager, UploadStatus};
use super::{ServiceConfig, ServiceError};
use crate::calibration::{
    fit_ols, select_model, CalibrationModel, ModelRegistry, PerceptionLabel, RegistrySnapshot, Scope,
};
use crate::policy::{
    expire_sweep, make_schedule, BlockState, Condition, ConditionSwitch, Decision, EventId, PolicyError, PromptEvent,
    PromptState, SkipReason, SurveyKind, Transition,
};
use crate::sensing::{read_windows_csv, EnergyWindow, WINDOW_MS};
use crate::time::{Clock, Timestamp, UtcOffset, MINUTE_MS};
use crate::ParticipantId;

type Shared = Arc<Mutex<ParticipantState>>;

#[derive(Debug, Default)]
struct Directory {
    by_id: BTreeMap<ParticipantId, Shared>,
    aliases: HashMap<String, ParticipantId>,
    block_state: BlockState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestOutcome {
    Inserted,
    Duplicate,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UploadReport {
    pub status: Option<UploadStatus>,
    pub ingested: u64,
    pub duplicates: u64,
    pub conflicts: u64,
    pub rejected: u64,
    /// First few per-row problems.
    pub errors: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubmitOutcome {
    pub transition: Transition,
    pub label_recorded: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TickReport {
    pub to: Option<Timestamp>,
    pub prompts_sent: u64,
    pub expired: u64,
    pub models_fitted: u64,
}

/// One line of the prompt-transition export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub event_id: EventId,
    pub participant_id: ParticipantId,
    pub kind: SurveyKind,
    pub condition: Condition,
    pub state: PromptState,
    pub at: Timestamp,
}

const MAX_REPORTED_ROW_ERRORS: usize = 20;

/// The hub. Cheap to share behind an `Arc`; every method takes `&self`.
///
/// Lock order: directory, then one participant at a time, then labels,
/// models and log. Holding several participant locks is only done in
/// ascending id order.
pub struct Service {
    config: ServiceConfig,
    clock: Arc<dyn Clock>,
    directory: RwLock<Directory>,
    models: ModelRegistry,
    labels: Mutex<Vec<PerceptionLabel>>,
    log: Mutex<EventLog>,
    cursor: Mutex<Option<Timestamp>>,
    uploads: Mutex<UploadManager>,
    skips: Mutex<BTreeMap<String, u64>>,
}

impl std::fmt::Debug for Service {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Service")
            .field("config", &self.config)
            .field("participants", &self.directory.read().by_id.len())
            .field("log_len", &self.log.lock().len())
            .finish()
    }
}

fn skip_name(reason: &SkipReason) -> &'static str {
    match reason {
        SkipReason::OutsideWindow => "outside_window",
        SkipReason::LowCoverage { .. } => "low_coverage",
        SkipReason::NoModel => "no_model",
        SkipReason::NotCalm { .. } => "not_calm",
        SkipReason::Spacing { .. } => "spacing",
        SkipReason::DailyCap { .. } => "daily_cap",
        SkipReason::ConditionMismatch { .. } => "condition_mismatch",
    }
}

/// Event ids start with the participant's display id.
fn owner_of(event_id: &EventId) -> Result<ParticipantId, ServiceError> {
    event_id
        .as_str()
        .split('-')
        .next()
        .and_then(|p| p.parse().ok())
        .ok_or_else(|| ServiceError::UnknownEvent(event_id.clone()))
}

fn pin_hash(salt: &str, pin: &str) -> String {
    let mut h = Sha256::new();
    h.update(salt.as_bytes());
    h.update(pin.as_bytes());
    hex::encode(h.finalize())
}

impl Service {
    fn with_log(config: ServiceConfig, clock: Arc<dyn Clock>, log: EventLog) -> Self {
        Service {
            directory: RwLock::new(Directory {
                block_state: BlockState::new(config.study_seed),
                ..Directory::default()
            }),
            config,
            clock,
            models: ModelRegistry::new(),
            labels: Mutex::new(Vec::new()),
            log: Mutex::new(log),
            cursor: Mutex::new(None),
            uploads: Mutex::new(UploadManager::default()),
            skips: Mutex::new(BTreeMap::new()),
        }
    }

    /// A service that keeps its log in memory only.
    pub fn in_memory(config: ServiceConfig, clock: Arc<dyn Clock>) -> Self {
        let svc = Self::with_log(config.clone(), clock, EventLog::memory());
        svc.log
            .lock()
            .append(&StoredEvent::Configured { study_seed: config.study_seed, policy: config.policy })
            .expect("memory log cannot fail");
        svc
    }

    /// Opens a file-backed service, replaying any existing log. An existing
    /// log keeps the configuration it was created with.
    pub fn open(path: &Path, config: ServiceConfig, clock: Arc<dyn Clock>, sync: bool) -> Result<Self, ServiceError> {
        let (log, events) = EventLog::open_file(path, sync)?;
        if events.is_empty() {
            let svc = Self::with_log(config.clone(), clock, log);
            svc.log.lock().append(&StoredEvent::Configured { study_seed: config.study_seed, policy: config.policy })?;
            return Ok(svc);
        }
        let logged = Self::logged_config(&events)?;
        if logged != config {
            tracing::warn!("configuration differs from the existing log; using the logged configuration");
        }
        let svc = Self::with_log(logged, clock, log);
        svc.replay(&events)?;
        Ok(svc)
    }

    /// Rebuilds an in-memory service from log events.
    pub fn from_events(events: &[StoredEvent], clock: Arc<dyn Clock>) -> Result<Self, ServiceError> {
        let config = Self::logged_config(events)?;
        let mut log = EventLog::memory();
        for e in events {
            log.append(e)?;
        }
        let svc = Self::with_log(config, clock, log);
        svc.replay(events)?;
        Ok(svc)
    }

    fn logged_config(events: &[StoredEvent]) -> Result<ServiceConfig, ServiceError> {
        match events.first() {
            Some(StoredEvent::Configured { study_seed, policy }) => {
                Ok(ServiceConfig { study_seed: *study_seed, policy: policy.clone() })
            }
            _ => Err(ServiceError::Storage("log does not start with a configuration record".into())),
        }
    }

    fn replay(&self, events: &[StoredEvent]) -> Result<(), ServiceError> {
        for (i, ev) in events.iter().enumerate().skip(1) {
            self.apply_replayed(ev).map_err(|e| ServiceError::Storage(format!("replaying record {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    fn apply_replayed(&self, ev: &StoredEvent) -> Result<(), String> {
        match ev {
            StoredEvent::Configured { .. } => Err("duplicate configuration record".into()),
            StoredEvent::ParticipantRegistered { participant, block_state } => {
                self.insert_participant(&mut self.directory.write(), participant.clone(), *block_state);
                Ok(())
            }
            StoredEvent::ModelsFitted { models } => {
                self.models.publish(models.iter().cloned());
                Ok(())
            }
            StoredEvent::SchedulerAdvanced { to } => {
                *self.cursor.lock() = Some(*to);
                Ok(())
            }
            other => {
                let pid = other.participant_id().ok_or("event without participant")?;
                let p = self.shared(pid).map_err(|e| e.to_string())?;
                let mut st = p.lock();
                if let StoredEvent::LabelRecorded { label } = other {
                    self.labels.lock().push(label.clone());
                }
                st.apply(other)
            }
        }
    }

    fn insert_participant(&self, dir: &mut Directory, participant: Participant, block_state: BlockState) {
        dir.block_state = block_state;
        dir.aliases.insert(participant.display_alias.clone(), participant.id);
        let id = participant.id;
        let st = ParticipantState::new(participant, self.config.study_seed, &self.config.policy);
        dir.by_id.insert(id, Arc::new(Mutex::new(st)));
    }

    /// Logs a participant-scoped event, then applies it.
    fn commit(&self, st: &mut ParticipantState, ev: StoredEvent) -> Result<(), ServiceError> {
        self.log.lock().append(&ev)?;
        if let StoredEvent::LabelRecorded { label } = &ev {
            self.labels.lock().push(label.clone());
        }
        st.apply(&ev).map_err(ServiceError::Storage)
    }

    fn shared(&self, pid: ParticipantId) -> Result<Shared, ServiceError> {
        self.directory.read().by_id.get(&pid).cloned().ok_or(ServiceError::UnknownParticipant(pid))
    }

    fn all(&self) -> Vec<Shared> {
        self.directory.read().by_id.values().cloned().collect()
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    // ---- participants -------------------------------------------------

    /// Enrolls a participant. Study day 1 is the local day after enrollment.
    pub fn register_participant(&self, alias: &str, utc_offset_minutes: i32) -> Result<Participant, ServiceError> {
        let alias = alias.trim();
        if alias.is_empty() {
            return Err(ServiceError::Validation("alias must not be empty".into()));
        }
        let offset = UtcOffset::from_minutes(utc_offset_minutes)
            .ok_or_else(|| ServiceError::Validation(format!("utc offset {utc_offset_minutes} min out of range")))?;
        let now = self.clock.now();
        let mut dir = self.directory.write();
        if dir.aliases.contains_key(alias) {
            return Err(ServiceError::DuplicateAlias(alias.to_string()));
        }
        let id = ParticipantId::new(dir.by_id.keys().next_back().map_or(1, |p| p.get() + 1));
        let mut block_state = dir.block_state;
        let schedule = make_schedule(id, &mut block_state);
        let study_start = now
            .local_date(offset)
            .checked_add_days(Days::new(1))
            .ok_or_else(|| ServiceError::Validation("enrollment date out of range".into()))?;
        let participant = Participant {
            id,
            display_alias: alias.to_string(),
            utc_offset: offset,
            enrolled_at: now,
            study_start,
            schedule,
            active: true,
        };
        self.log
            .lock()
            .append(&StoredEvent::ParticipantRegistered { participant: participant.clone(), block_state })?;
        self.insert_participant(&mut dir, participant.clone(), block_state);
        Ok(participant)
    }

    pub fn participants(&self) -> Vec<Participant> {
        self.all().iter().map(|p| p.lock().participant.clone()).collect()
    }

    pub fn participant(&self, pid: ParticipantId) -> Result<Participant, ServiceError> {
        Ok(self.shared(pid)?.lock().participant.clone())
    }

    pub fn set_active(&self, pid: ParticipantId, active: bool) -> Result<(), ServiceError> {
        let p = self.shared(pid)?;
        let mut st = p.lock();
        let at = self.clock.now();
        self.commit(&mut st, StoredEvent::ParticipantActivity { participant_id: pid, active, at })
    }

    /// The condition in force for a participant at `at`.
    pub fn condition_at(&self, pid: ParticipantId, at: Timestamp) -> Result<Option<Condition>, ServiceError> {
        Ok(self.shared(pid)?.lock().timeline.condition_at(at))
    }

    /// Experimenter override, effective from `effective_at` until the next
    /// scheduled week starts.
    pub fn switch_condition(
        &self,
        pid: ParticipantId,
        condition: Condition,
        effective_at: Timestamp,
    ) -> Result<(), ServiceError> {
        let now = self.clock.now();
        if effective_at < now {
            return Err(ServiceError::Retroactive { effective_at, now });
        }
        let p = self.shared(pid)?;
        let mut st = p.lock();
        let switch = ConditionSwitch { condition, effective_at };
        self.commit(&mut st, StoredEvent::ConditionSwitched { participant_id: pid, switch, at: now })
    }

    // ---- sensing --------------------------------------------------------

    /// Stores one window. Re-sending an identical window is a no-op;
    /// a different value for an already stored window is a conflict.
    pub fn ingest_window(&self, window: EnergyWindow) -> Result<IngestOutcome, ServiceError> {
        window.validate().map_err(|e| ServiceError::Validation(e.to_string()))?;
        let now = self.clock.now();
        if window.window_start.plus_millis(WINDOW_MS) > now.plus_millis(MINUTE_MS) {
            return Err(ServiceError::Validation(format!("window {} has not closed yet", window.window_start)));
        }
        let p = self.shared(window.participant_id)?;
        let mut st = p.lock();
        if !st.participant.active {
            return Err(ServiceError::Inactive(window.participant_id));
        }
        if let Some(existing) = st.windows.get(&window.window_start) {
            return if *existing == window {
                Ok(IngestOutcome::Duplicate)
            } else {
                Err(ServiceError::Conflict(format!(
                    "window {} for {} already stored with different values",
                    window.window_start, window.participant_id
                )))
            };
        }
        self.commit(&mut st, StoredEvent::WindowIngested { window, at: now })?;
        Ok(IngestOutcome::Inserted)
    }

    pub fn windows(&self, pid: ParticipantId) -> Result<Vec<EnergyWindow>, ServiceError> {
        Ok(self.shared(pid)?.lock().windows.values().cloned().collect())
    }

    pub fn report_device_status(&self, report: DeviceReport) -> Result<DeviceStatus, ServiceError> {
        if report.battery_pct.is_some_and(|b| b > 100) {
            return Err(ServiceError::Validation("battery_pct must be 0..=100".into()));
        }
        let p = self.shared(report.participant_id)?;
        let mut st = p.lock();
        let at = self.clock.now();
        self.commit(&mut st, StoredEvent::DeviceReported { report, at })?;
        Ok(st.device.clone())
    }

    pub fn device_status(&self, pid: ParticipantId) -> Result<DeviceStatus, ServiceError> {
        Ok(self.shared(pid)?.lock().device.clone())
    }

    /// Sets the 4-8 digit PIN that guards stopping a recording.
    pub fn set_pin(&self, pid: ParticipantId, pin: &str) -> Result<(), ServiceError> {
        if !(4..=8).contains(&pin.len()) || !pin.bytes().all(|b| b.is_ascii_digit()) {
            return Err(ServiceError::Validation("PIN must be 4 to 8 digits".into()));
        }
        let p = self.shared(pid)?;
        let mut st = p.lock();
        let salt = hex::encode(rand::random::<[u8; 16]>());
        let hash = pin_hash(&salt, pin);
        self.commit(&mut st, StoredEvent::PinSet { participant_id: pid, salt, hash })
    }

    pub fn stop_recording(&self, pid: ParticipantId, pin: &str) -> Result<(), ServiceError> {
        let p = self.shared(pid)?;
        let mut st = p.lock();
        let stored = st.pin.as_ref().ok_or(ServiceError::PinNotSet)?;
        if pin_hash(&stored.salt, pin) != stored.hash {
            return Err(ServiceError::PinMismatch);
        }
        let at = self.clock.now();
        self.commit(&mut st, StoredEvent::RecordingStopped { participant_id: pid, at })
    }

    // ---- uploads ----------------------------------------------------------

    pub fn open_upload(
        &self,
        pid: ParticipantId,
        total_bytes: u64,
        checksum: &str,
    ) -> Result<UploadStatus, ServiceError> {
        self.shared(pid)?;
        self.uploads.lock().open(pid, total_bytes, checksum.to_string())
    }

    pub fn put_chunk(&self, session_id: &str, offset: u64, bytes: &[u8]) -> Result<UploadStatus, ServiceError> {
        let mut uploads = self.uploads.lock();
        let s = uploads.get_mut(session_id)?;
        s.write_chunk(offset, bytes)?;
        Ok(s.status())
    }

    pub fn upload_status(&self, session_id: &str) -> Result<UploadStatus, ServiceError> {
        self.uploads.lock().status(session_id)
    }

    /// Verifies the payload and ingests it as a windows CSV. Rows that are
    /// already stored count as duplicates. Finishing a session again returns
    /// the report of the first finish.
    pub fn finish_upload(&self, session_id: &str) -> Result<UploadReport, ServiceError> {
        let mut uploads = self.uploads.lock();
        if let Some(report) = uploads.report(session_id) {
            return Ok(report.clone());
        }
        let s = uploads.get_mut(session_id)?;
        let payload = s.finish()?.to_vec();
        let status = s.status();
        let windows = read_windows_csv(payload.as_slice()).map_err(|e| ServiceError::Validation(e.to_string()))?;
        let mut report = UploadReport { status: Some(status.clone()), ..UploadReport::default() };
        for w in windows {
            let result = if w.participant_id != status.participant_id {
                Err(ServiceError::Validation(format!(
                    "row for {} in {}'s upload",
                    w.participant_id, status.participant_id
                )))
            } else {
                self.ingest_window(w)
            };
            match result {
                Ok(IngestOutcome::Inserted) => report.ingested += 1,
                Ok(IngestOutcome::Duplicate) => report.duplicates += 1,
                Err(e) => {
                    if matches!(e, ServiceError::Conflict(_)) {
                        report.conflicts += 1;
                    } else {
                        report.rejected += 1;
                    }
                    if report.errors.len() < MAX_REPORTED_ROW_ERRORS {
                        report.errors.push(e.to_string());
                    }
                }
            }
        }
        uploads.record_report(session_id, report.clone());
        Ok(report)
    }

    // ---- prompting --------------------------------------------------------

    /// Runs the scheduler up to the clock's current time.
    pub fn tick(&self) -> Result<TickReport, ServiceError> {
        self.advance_to(self.clock.now())
    }

    /// Processes every scheduled action in `(cursor, now]` for each
    /// participant, then expires overdue prompts.
    pub fn advance_to(&self, now: Timestamp) -> Result<TickReport, ServiceError> {
        let mut cursor = self.cursor.lock();
        let mut report = TickReport::default();
        let cfg = &self.config.policy;
        for p in self.all() {
            let mut st = p.lock();
            let enrolled = st.participant.enrolled_at;
            let from = cursor.map_or(enrolled, |c| c.max(enrolled));
            if st.participant.active && now > from {
                let pid = st.id();
                let actions = {
                    let st = &mut *st;
                    st.scheduler.actions_between(&st.timeline, from, now)
                };
                for action in actions {
                    let snapshot = self.models.snapshot();
                    let model = select_model(pid, &snapshot, cfg.min_labels).ok();
                    let decision = st.scheduler.decide(action, &st.timeline, &st.limiter, |t| st.lookback(t), model);
                    match decision {
                        Decision::Emit(event) => {
                            self.commit(&mut st, StoredEvent::PromptSent { event })?;
                            report.prompts_sent += 1;
                        }
                        Decision::Skip { reason, .. } => {
                            *self.skips.lock().entry(skip_name(&reason).to_string()).or_default() += 1;
                        }
                        Decision::FitModels => {
                            report.models_fitted += self.fit_models_at(action.at)?.len() as u64;
                        }
                    }
                }
            }
            report.expired += self.sweep(&mut st, now)? as u64;
        }
        if cursor.is_none_or(|c| now > c) {
            self.log.lock().append(&StoredEvent::SchedulerAdvanced { to: now })?;
            *cursor = Some(now);
            report.to = Some(now);
        }
        Ok(report)
    }

    fn sweep(&self, st: &mut ParticipantState, now: Timestamp) -> Result<usize, ServiceError> {
        let due = expire_sweep(now, st.pending());
        let n = due.len();
        let participant_id = st.id();
        for transition in due {
            self.commit(st, StoredEvent::PromptTransitioned { participant_id, transition, response: None })?;
        }
        Ok(n)
    }

    /// Scheduler position: every action up to here has been processed.
    pub fn cursor(&self) -> Option<Timestamp> {
        *self.cursor.lock()
    }

    /// Counts of skipped actions by reason.
    pub fn skip_counts(&self) -> BTreeMap<String, u64> {
        self.skips.lock().clone()
    }

    /// Pending prompts for a participant, oldest first, after expiring
    /// overdue ones.
    pub fn deliver_pending(&self, pid: ParticipantId) -> Result<Vec<PromptEvent>, ServiceError> {
        let p = self.shared(pid)?;
        let mut st = p.lock();
        self.sweep(&mut st, self.clock.now())?;
        let mut out: Vec<PromptEvent> = st.pending().cloned().collect();
        out.sort_by_key(|e| (e.sent_at, e.kind));
        Ok(out)
    }

    pub fn events(&self, pid: ParticipantId) -> Result<Vec<PromptEvent>, ServiceError> {
        Ok(self.shared(pid)?.lock().events.clone())
    }

    pub fn event(&self, event_id: &EventId) -> Result<PromptEvent, ServiceError> {
        let p = self.shared(owner_of(event_id)?)?;
        let st = p.lock();
        st.event(event_id).cloned().ok_or_else(|| ServiceError::UnknownEvent(event_id.clone()))
    }

    pub fn response(&self, event_id: &EventId) -> Result<Option<SurveyResponse>, ServiceError> {
        let p = self.shared(owner_of(event_id)?)?;
        let st = p.lock();
        Ok(st.responses.get(event_id).cloned())
    }

    /// Records an answer. The submission time is the service clock; answers
    /// at or after `expires_at` are rejected and the prompt expires. An
    /// intraday answer given while the hourly condition is active also
    /// becomes a calibration label when the lookback is usable.
    pub fn submit_response(
        &self,
        event_id: &EventId,
        mut response: SurveyResponse,
    ) -> Result<SubmitOutcome, ServiceError> {
        if response.event_id != *event_id {
            return Err(ServiceError::Validation(format!("response is for {}, not {event_id}", response.event_id)));
        }
        let pid = owner_of(event_id)?;
        let p = self.shared(pid)?;
        let mut st = p.lock();
        let now = self.clock.now();
        let event = st.event(event_id).cloned().ok_or_else(|| ServiceError::UnknownEvent(event_id.clone()))?;
        let transition = match event.check_answer(now) {
            Ok(t) => t,
            Err(PolicyError::Expired { event_id, expires_at }) => {
                self.sweep(&mut st, now)?;
                return Err(ServiceError::Expired { event_id, expires_at });
            }
            Err(PolicyError::NotPending { event_id, state }) => {
                return Err(ServiceError::NotPending { event_id, state })
            }
            Err(e) => return Err(ServiceError::Validation(e.to_string())),
        };
        validate(event.kind, st.week_of(event.sent_at), &response.items).map_err(ServiceError::Validation)?;
        response.submitted_at = Some(now);
        let rating = response.activity();
        self.commit(
            &mut st,
            StoredEvent::PromptTransitioned {
                participant_id: pid,
                transition: transition.clone(),
                response: Some(response),
            },
        )?;

        let mut label_recorded = false;
        if event.kind == SurveyKind::Intraday && st.timeline.condition_at(now) == Some(Condition::Hourly) {
            let feature = st.lookback(now);
            match rating.map(|r| PerceptionLabel::new(pid, r, feature, self.config.policy.min_coverage)) {
                Some(Ok(label)) => {
                    self.commit(&mut st, StoredEvent::LabelRecorded { label })?;
                    label_recorded = true;
                }
                Some(Err(e)) => tracing::debug!(%pid, "no label: {e}"),
                None => {}
            }
        }
        Ok(SubmitOutcome { transition, label_recorded })
    }

    // ---- calibration ------------------------------------------------------

    pub fn labels(&self) -> Vec<PerceptionLabel> {
        self.labels.lock().clone()
    }

    pub fn models(&self) -> Arc<RegistrySnapshot> {
        self.models.snapshot()
    }

    pub fn registry_json(&self) -> String {
        self.models.to_json()
    }

    /// Fits the global model and one per participant from all labels so far.
    pub fn fit_models(&self) -> Result<Vec<CalibrationModel>, ServiceError> {
        self.fit_models_at(self.clock.now())
    }

    fn fit_models_at(&self, at: Timestamp) -> Result<Vec<CalibrationModel>, ServiceError> {
        let labels = self.labels.lock().clone();
        let mut models = Vec::new();
        match fit_ols(&labels, Scope::Global, at) {
            Ok(m) => models.push(m),
            Err(e) => tracing::warn!("global model not fitted: {e}"),
        }
        let mut groups: BTreeMap<ParticipantId, Vec<PerceptionLabel>> = BTreeMap::new();
        for l in labels {
            groups.entry(l.participant_id).or_default().push(l);
        }
        for (pid, group) in groups {
            if let Ok(m) = fit_ols(&group, Scope::Participant(pid), at) {
                models.push(m);
            }
        }
        if !models.is_empty() {
            self.publish_models(models.clone())?;
        }
        Ok(models)
    }

    /// Installs externally fitted models.
    pub fn publish_models(&self, models: Vec<CalibrationModel>) -> Result<(), ServiceError> {
        if models.iter().any(|m| !m.slope.is_finite() || !m.intercept.is_finite()) {
            return Err(ServiceError::Validation("model parameters must be finite".into()));
        }
        let mut log = self.log.lock();
        log.append(&StoredEvent::ModelsFitted { models: models.clone() })?;
        self.models.publish(models);
        Ok(())
    }

    // ---- reporting --------------------------------------------------------

    pub fn metrics(&self, filter: MetricsFilter) -> MetricsSummary {
        let shared: Vec<Shared> = match filter.participant {
            Some(pid) => self.shared(pid).into_iter().collect(),
            None => self.all(),
        };
        let guards: Vec<_> = shared.iter().map(|p| p.lock()).collect();
        summarize(filter, guards.iter().flat_map(|st| st.events.iter().map(|e| (e, st.responses.get(&e.id)))))
    }

    /// Prompt lifecycle as NDJSON: one `pending` line per send and one
    /// line per later transition, in log order.
    pub fn export_prompt_records<W: Write>(&self, mut out: W) -> Result<u64, ServiceError> {
        let log = self.log.lock();
        let mut kinds: HashMap<EventId, (ParticipantId, SurveyKind, Condition)> = HashMap::new();
        let mut n = 0;
        for ev in log.records() {
            let record = match ev {
                StoredEvent::PromptSent { event } => {
                    kinds.insert(event.id.clone(), (event.participant_id, event.kind, event.condition_at_send));
                    PromptRecord {
                        event_id: event.id.clone(),
                        participant_id: event.participant_id,
                        kind: event.kind,
                        condition: event.condition_at_send,
                        state: PromptState::Pending,
                        at: event.sent_at,
                    }
                }
                StoredEvent::PromptTransitioned { transition, .. } => {
                    let Some(&(participant_id, kind, condition)) = kinds.get(&transition.event_id) else {
                        continue;
                    };
                    PromptRecord {
                        event_id: transition.event_id.clone(),
                        participant_id,
                        kind,
                        condition,
                        state: transition.to,
                        at: transition.at,
                    }
                }
                _ => continue,
            };
            serde_json::to_writer(&mut out, &record).map_err(|e| ServiceError::Storage(e.to_string()))?;
            out.write_all(b"\n")?;
            n += 1;
        }
        Ok(n)
    }

    /// Writes the whole event log as NDJSON.
    pub fn export_log<W: Write>(&self, out: W) -> Result<(), ServiceError> {
        Ok(self.log.lock().write_ndjson(out)?)
    }

    pub fn log_records(&self) -> Vec<StoredEvent> {
        self.log.lock().records().to_vec()
    }

    pub fn log_len(&self) -> usize {
        self.log.lock().len()
    }
}
