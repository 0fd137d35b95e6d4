//! Resumable chunked uploads verified by a SHA-256 of the full payload.
//!
//! Chunks may arrive in any order, be resent, or overlap earlier chunks as
//! long as overlapping bytes agree. Coverage is kept as a set of disjoint,
//! merged byte ranges.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::service::UploadReport;
use super::ServiceError;
use crate::ParticipantId;

/// Largest payload a session may declare.
pub const MAX_UPLOAD_BYTES: u64 = 64 * 1024 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UploadState {
    Open,
    Complete,
    Aborted,
}

/// Client-visible view of a session.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadStatus {
    pub session_id: String,
    pub participant_id: ParticipantId,
    pub declared_total_bytes: u64,
    /// Received `[start, end)` ranges, merged and sorted.
    pub received: Vec<(u64, u64)>,
    pub missing: Vec<(u64, u64)>,
    pub checksum: String,
    pub state: UploadState,
}

#[derive(Debug)]
pub struct UploadSession {
    pub session_id: String,
    pub participant_id: ParticipantId,
    pub declared_total_bytes: u64,
    /// offset -> length of each merged received range
    pub chunks: BTreeMap<u64, u64>,
    pub checksum: String,
    pub state: UploadState,
    buffer: Vec<u8>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Gaps of `[0, total)` not covered by `ranges` (sorted, disjoint).
pub fn missing_ranges(total: u64, ranges: impl IntoIterator<Item = (u64, u64)>) -> Vec<(u64, u64)> {
    let mut out = Vec::new();
    let mut cursor = 0;
    for (start, end) in ranges {
        if start > cursor {
            out.push((cursor, start));
        }
        cursor = cursor.max(end);
    }
    if cursor < total {
        out.push((cursor, total));
    }
    out
}

impl UploadSession {
    pub fn new(
        session_id: String,
        participant_id: ParticipantId,
        declared_total_bytes: u64,
        checksum: String,
    ) -> Result<Self, ServiceError> {
        if declared_total_bytes > MAX_UPLOAD_BYTES {
            return Err(ServiceError::Validation(format!(
                "declared size {declared_total_bytes} exceeds {MAX_UPLOAD_BYTES}"
            )));
        }
        let checksum = checksum.to_ascii_lowercase();
        if checksum.len() != 64 || !checksum.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(ServiceError::Validation("checksum must be a 64-character SHA-256 hex digest".into()));
        }
        Ok(UploadSession {
            session_id,
            participant_id,
            declared_total_bytes,
            chunks: BTreeMap::new(),
            checksum,
            state: UploadState::Open,
            buffer: vec![0; declared_total_bytes as usize],
        })
    }

    fn ranges(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.chunks.iter().map(|(&o, &l)| (o, o + l))
    }

    pub fn missing(&self) -> Vec<(u64, u64)> {
        missing_ranges(self.declared_total_bytes, self.ranges())
    }

    pub fn status(&self) -> UploadStatus {
        UploadStatus {
            session_id: self.session_id.clone(),
            participant_id: self.participant_id,
            declared_total_bytes: self.declared_total_bytes,
            received: self.ranges().collect(),
            missing: self.missing(),
            checksum: self.checksum.clone(),
            state: self.state,
        }
    }

    /// Stores a chunk. After completion, resending bytes that match the
    /// payload is still accepted as a no-op.
    pub fn write_chunk(&mut self, offset: u64, bytes: &[u8]) -> Result<(), ServiceError> {
        let closed = || ServiceError::SessionClosed { session_id: self.session_id.clone(), state: self.state };
        match self.state {
            UploadState::Open => {}
            UploadState::Complete => {
                let start = offset as usize;
                let same = start.checked_add(bytes.len()).and_then(|end| self.buffer.get(start..end)) == Some(bytes);
                return if same { Ok(()) } else { Err(closed()) };
            }
            UploadState::Aborted => return Err(closed()),
        }
        let end =
            offset.checked_add(bytes.len() as u64).filter(|&e| e <= self.declared_total_bytes).ok_or_else(|| {
                ServiceError::Validation(format!(
                    "chunk [{offset}, +{}) exceeds declared size {}",
                    bytes.len(),
                    self.declared_total_bytes
                ))
            })?;
        if bytes.is_empty() {
            return Ok(());
        }
        // every already-received byte in the new range must match
        for (s, e) in self.ranges() {
            let (lo, hi) = (s.max(offset), e.min(end));
            if lo < hi && self.buffer[lo as usize..hi as usize] != bytes[(lo - offset) as usize..(hi - offset) as usize]
            {
                return Err(ServiceError::Conflict(format!("chunk bytes differ from received data in [{lo}, {hi})")));
            }
        }
        self.buffer[offset as usize..end as usize].copy_from_slice(bytes);

        let (mut start, mut stop) = (offset, end);
        let touching: Vec<u64> = self.ranges().filter(|&(s, e)| s <= stop && e >= start).map(|(s, _)| s).collect();
        for s in touching {
            let len = self.chunks.remove(&s).unwrap_or(0);
            start = start.min(s);
            stop = stop.max(s + len);
        }
        self.chunks.insert(start, stop - start);
        Ok(())
    }

    /// Verifies coverage and checksum. On a checksum mismatch the session is
    /// aborted and the client must start a new one.
    pub fn finish(&mut self) -> Result<&[u8], ServiceError> {
        match self.state {
            UploadState::Complete => return Ok(&self.buffer),
            UploadState::Aborted => {
                return Err(ServiceError::SessionClosed { session_id: self.session_id.clone(), state: self.state });
            }
            UploadState::Open => {}
        }
        let missing = self.missing();
        if !missing.is_empty() {
            return Err(ServiceError::Incomplete { missing });
        }
        let actual = sha256_hex(&self.buffer);
        if actual != self.checksum {
            self.state = UploadState::Aborted;
            self.buffer = Vec::new();
            return Err(ServiceError::ChecksumMismatch { expected: self.checksum.clone(), actual });
        }
        self.state = UploadState::Complete;
        Ok(&self.buffer)
    }
}

/// Finished sessions are kept (so a retried finish still succeeds) until
/// the table grows past this size.
const MAX_RETAINED_SESSIONS: usize = 1024;

/// In-memory session table. Sessions do not survive a restart; clients
/// that find their session gone open a new one.
#[derive(Debug, Default)]
pub struct UploadManager {
    sessions: HashMap<String, UploadSession>,
    /// Outcome of each finished session, returned again on a retried finish.
    reports: HashMap<String, UploadReport>,
    next: u64,
}

impl UploadManager {
    pub fn open(
        &mut self,
        participant_id: ParticipantId,
        total: u64,
        checksum: String,
    ) -> Result<UploadStatus, ServiceError> {
        if self.sessions.len() >= MAX_RETAINED_SESSIONS {
            self.prune();
        }
        self.next += 1;
        let id = format!("u{:06}", self.next);
        let session = UploadSession::new(id.clone(), participant_id, total, checksum)?;
        let status = session.status();
        self.sessions.insert(id, session);
        Ok(status)
    }

    pub fn get_mut(&mut self, session_id: &str) -> Result<&mut UploadSession, ServiceError> {
        self.sessions.get_mut(session_id).ok_or_else(|| ServiceError::UnknownSession(session_id.to_string()))
    }

    pub fn status(&self, session_id: &str) -> Result<UploadStatus, ServiceError> {
        self.sessions
            .get(session_id)
            .map(UploadSession::status)
            .ok_or_else(|| ServiceError::UnknownSession(session_id.to_string()))
    }

    pub fn report(&self, session_id: &str) -> Option<&UploadReport> {
        self.reports.get(session_id)
    }

    pub fn record_report(&mut self, session_id: &str, report: UploadReport) {
        self.reports.insert(session_id.to_string(), report);
    }

    /// Forgets finished and aborted sessions.
    pub fn prune(&mut self) {
        self.sessions.retain(|_, s| s.state == UploadState::Open);
        self.reports.clear();
    }
}
