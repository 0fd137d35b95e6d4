use chrono::{Days, NaiveDate, Timelike};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::profile::Connectivity;
use super::substream;
use crate::sensing::{windows_to_csv_bytes, EnergyWindow, WINDOW_MS};
use crate::server::{sha256_hex, Hub, ServiceError, UploadReport};
use crate::time::{Timestamp, UtcOffset, MINUTE_MS};
use crate::ParticipantId;

/// Offline intervals `[from, to)` for one participant.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConnectivitySchedule {
    pub offline: Vec<(Timestamp, Timestamp)>,
}

impl ConnectivitySchedule {
    pub fn always_online() -> Self {
        Self::default()
    }

    pub fn generate(
        cfg: &Connectivity,
        participant_id: ParticipantId,
        offset: UtcOffset,
        first_day: NaiveDate,
        days: u32,
        seed: u64,
    ) -> Self {
        let mut rng = substream(seed, "connectivity", participant_id.get());
        let mut offline = Vec::new();
        for d in 0..days {
            let date = first_day + Days::new(d as u64);
            let hit = rng.random::<f64>() < cfg.daily_outage_prob;
            let start_min = rng.random_range(8 * 60..20 * 60);
            let len = rng.random_range(0..=cfg.outage_minutes_max.max(1)) as i64;
            if hit && len > 0 {
                let from = offset.midnight(date).plus_minutes(start_min);
                offline.push((from, from.plus_minutes(len)));
            }
        }
        if let Some(day) = cfg.permanent_outage_from_day {
            let from = offset.midnight(first_day + Days::new(day.saturating_sub(1) as u64));
            offline.push((from, Timestamp::from_millis(i64::MAX)));
        }
        offline.sort();
        ConnectivitySchedule { offline }
    }

    pub fn is_online(&self, t: Timestamp) -> bool {
        !self.offline.iter().any(|&(a, b)| t >= a && t < b)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransportReport {
    pub participant_id: Option<ParticipantId>,
    pub generated: u64,
    pub streamed: u64,
    pub stream_failures: u64,
    pub batch_uploads: u64,
    pub batch_bytes: u64,
    pub batch_windows: u64,
    pub chunk_retries: u64,
    pub sessions_reopened: u64,
    pub undelivered: u64,
    pub errors: Vec<String>,
}

const MAX_UPLOAD_ATTEMPTS: u32 = 64;

/// Uploads `payload` through a resumable session, resuming from the
/// server's view of received ranges after any transport failure.
pub fn resumable_upload(
    hub: &dyn Hub,
    participant_id: ParticipantId,
    payload: &[u8],
    chunk_size: usize,
    report: &mut TransportReport,
) -> Result<UploadReport, ServiceError> {
    let checksum = sha256_hex(payload);
    let chunk_size = chunk_size.max(1);
    let mut attempts = 0;
    let mut session: Option<String> = None;
    let mut missing = vec![(0u64, payload.len() as u64)];
    loop {
        attempts += 1;
        if attempts > MAX_UPLOAD_ATTEMPTS {
            return Err(ServiceError::Transport(format!("upload gave up after {MAX_UPLOAD_ATTEMPTS} attempts")));
        }
        let id = match &session {
            Some(id) => id.clone(),
            None => match hub.open_upload(participant_id, payload.len() as u64, &checksum) {
                Ok(status) => {
                    session = Some(status.session_id.clone());
                    missing = status.missing;
                    status.session_id
                }
                Err(e) if e.is_transient() => continue,
                Err(e) => return Err(e),
            },
        };
        let mut failed = false;
        'send: for &(a, b) in &missing {
            let mut off = a;
            while off < b {
                let end = (off + chunk_size as u64).min(b);
                if let Err(e) = hub.put_chunk(&id, off, &payload[off as usize..end as usize]) {
                    if !e.is_transient() {
                        return Err(e);
                    }
                    report.chunk_retries += 1;
                    failed = true;
                    break 'send;
                }
                off = end;
            }
        }
        if !failed {
            match hub.finish_upload(&id) {
                Ok(r) => return Ok(r),
                Err(ServiceError::ChecksumMismatch { .. }) | Err(ServiceError::SessionClosed { .. }) => {
                    report.sessions_reopened += 1;
                    session = None;
                    missing = vec![(0, payload.len() as u64)];
                    continue;
                }
                Err(ServiceError::UnknownSession(_)) => {
                    report.sessions_reopened += 1;
                    session = None;
                    continue;
                }
                Err(ServiceError::Incomplete { missing: m }) => {
                    missing = m;
                    continue;
                }
                Err(e) if e.is_transient() => {}
                Err(e) => return Err(e),
            }
        }
        match hub.upload_status(&id) {
            Ok(status) => missing = status.missing,
            Err(ServiceError::UnknownSession(_)) => {
                report.sessions_reopened += 1;
                session = None;
            }
            Err(e) if e.is_transient() => {}
            Err(e) => return Err(e),
        }
    }
}

/// Simulated watch: releases each window when it closes, streams it when
/// online, otherwise buffers it for the daily batch upload.
pub struct WatchClient {
    pub participant_id: ParticipantId,
    offset: UtcOffset,
    windows: Vec<EnergyWindow>,
    next: usize,
    buffer: Vec<EnergyWindow>,
    pub connectivity: ConnectivitySchedule,
    /// Local hour and minute of the daily batch upload.
    pub upload_at: (u32, u32),
    pub chunk_size: usize,
    retry_after: Option<Timestamp>,
    pub report: TransportReport,
}

impl WatchClient {
    pub fn new(
        participant_id: ParticipantId,
        offset: UtcOffset,
        windows: Vec<EnergyWindow>,
        connectivity: ConnectivitySchedule,
    ) -> Self {
        let report = TransportReport {
            participant_id: Some(participant_id),
            generated: windows.len() as u64,
            ..TransportReport::default()
        };
        WatchClient {
            participant_id,
            offset,
            windows,
            next: 0,
            buffer: Vec::new(),
            connectivity,
            upload_at: (21, 5),
            chunk_size: 4096,
            retry_after: None,
            report,
        }
    }

    pub fn buffered(&self) -> &[EnergyWindow] {
        &self.buffer
    }

    pub fn step(&mut self, now: Timestamp, hub: &dyn Hub) {
        let online = self.connectivity.is_online(now);
        while let Some(w) = self.windows.get(self.next) {
            if w.window_start.plus_millis(WINDOW_MS) > now {
                break;
            }
            let w = w.clone();
            self.next += 1;
            if !online {
                self.buffer.push(w);
                continue;
            }
            match hub.ingest(&w) {
                Ok(_) => self.report.streamed += 1,
                Err(e) if e.is_transient() => {
                    self.report.stream_failures += 1;
                    self.buffer.push(w);
                }
                Err(e) => self.report.errors.push(e.to_string()),
            }
        }
        let local = now.local(self.offset);
        let scheduled = (local.hour(), local.minute()) == self.upload_at;
        let retry = self.retry_after.is_some_and(|t| now >= t);
        if online && !self.buffer.is_empty() && (scheduled || retry) {
            self.flush(now, hub);
        }
    }

    /// One-tap batch upload of every unacknowledged window.
    pub fn flush(&mut self, now: Timestamp, hub: &dyn Hub) {
        if self.buffer.is_empty() {
            return;
        }
        let payload = windows_to_csv_bytes(&self.buffer);
        self.report.batch_uploads += 1;
        match resumable_upload(hub, self.participant_id, &payload, self.chunk_size, &mut self.report) {
            Ok(r) => {
                self.report.batch_bytes += payload.len() as u64;
                self.report.batch_windows += self.buffer.len() as u64;
                self.report.errors.extend(r.errors);
                self.buffer.clear();
                self.retry_after = None;
            }
            Err(e) => {
                self.report.errors.push(format!("batch upload failed: {e}"));
                self.retry_after = Some(now.plus_millis(60 * MINUTE_MS));
            }
        }
    }

    /// Releases any remaining windows, makes a last upload attempt if
    /// online and reports what never reached the server.
    pub fn finish(&mut self, now: Timestamp, hub: &dyn Hub) -> TransportReport {
        self.step(now, hub);
        if self.connectivity.is_online(now) {
            self.flush(now, hub);
        }
        self.report.undelivered = (self.buffer.len() + self.windows.len() - self.next) as u64;
        self.report.clone()
    }
}
